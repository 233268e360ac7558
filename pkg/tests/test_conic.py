import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubedmpc import conic
from tubedmpc.conic import ConicProgram, Status, solve


def test_scalar_lmi():
    p = ConicProgram("scalar")
    x = p.variable("x")
    p.add_psd("M", cp.bmat([[cp.reshape(x, (1, 1), order="C"), np.ones((1, 1))], [np.ones((1, 1)), cp.reshape(x, (1, 1), order="C")]]))
    p.minimize(x)
    sol = solve(p)
    assert sol.status is Status.OPTIMAL
    assert sol["x"] == pytest.approx(1.0, abs=1e-6)
    assert sol.residuals["min_psd_eig"] >= -1e-6


def test_min_trace_above_identity():
    p = ConicProgram()
    S = p.variable("S", (2, 2), symmetric=True)
    p.add_psd("S-I", S - np.eye(2))
    p.minimize(cp.trace(S))
    sol = solve(p)
    assert sol.ok
    assert sol.objective == pytest.approx(2.0, abs=1e-6)
    np.testing.assert_allclose(sol["S"], np.eye(2), atol=1e-5)


def _random_lmi(seed):
    """Feasibility LMI A0 + sum x_i A_i >= 0 built around a sampled interior point."""
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(2, 6)), int(rng.integers(1, 5))
    As = [(lambda G: G + G.T)(rng.normal(size=(n, n))) for _ in range(k)]
    x_feas = rng.normal(size=k)
    L = rng.normal(size=(n, n))
    slack = L @ L.T + 0.1 * np.eye(n)
    A0 = slack - sum(xi * Ai for xi, Ai in zip(x_feas, As))
    return A0, As, x_feas


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_feasibility_lmi(seed):
    A0, As, x_feas = _random_lmi(seed)
    # the planted point is feasible by construction
    assert np.linalg.eigvalsh(A0 + sum(x * A for x, A in zip(x_feas, As))).min() > 0
    p = ConicProgram("feas")
    x = p.variable("x", len(As))
    p.add_psd("lmi", A0 + sum(x[i] * As[i] for i in range(len(As))))
    p.add_ineq("box", cp.abs(x), 10 * (1 + np.abs(x_feas).max()))
    sol = solve(p)
    assert sol.status is Status.OPTIMAL
    M = A0 + sum(v * A for v, A in zip(sol["x"], As))
    assert np.linalg.eigvalsh(M).min() >= -1e-6


def test_infeasible_program_reported():
    p = ConicProgram()
    x = p.variable("x")
    p.add_ineq("up", x, -1.0)
    p.add_ineq("down", -x, -1.0)
    p.minimize(x)
    assert solve(p).status is Status.INFEASIBLE


def test_soc_epigraph_quadratic():
    p = ConicProgram()
    x = p.variable("x", 2)
    t = p.variable("t")
    p.add_soc("epi", t, x - np.array([1.0, 2.0]))
    p.minimize(t)
    sol = solve(p)
    np.testing.assert_allclose(sol["x"], [1.0, 2.0], atol=1e-5)


def test_equality_and_verify_tags():
    p = ConicProgram()
    x = p.variable("x", 2)
    p.add_eq("sum", cp.sum(x), 1.0)
    p.add_ineq("nonneg", -x)
    p.minimize(cp.sum(cp.multiply([1.0, 2.0], x)))
    sol = solve(p)
    assert sol.ok
    np.testing.assert_allclose(sol["x"], [1.0, 0.0], atol=1e-6)
    assert p.tags() == ["sum", "nonneg"]
    # perturb away from feasibility: re-verification names the violated constraint
    x.value = np.array([2.0, 0.0])
    chk = p.verify()
    assert not chk["ok"] and chk["worst_tag"] == "sum"


def test_undeclared_variable_rejected():
    p = ConicProgram()
    stray = cp.Variable(name="stray")
    with pytest.raises(ValueError):
        p.add_ineq("bad", stray, 1.0)


def test_duplicate_variable_rejected():
    p = ConicProgram()
    p.variable("x")
    with pytest.raises(KeyError):
        p.variable("x")


def test_psd_block_symmetrised():
    p = ConicProgram()
    X = p.variable("X", (2, 2))
    p.add_psd("X", X)
    (c,) = p.constraints
    M = c.exprs[0]
    X.value = np.array([[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_allclose(M.value, M.value.T)


def test_deterministic():
    def run():
        A0, As, _ = _random_lmi(7)
        p = ConicProgram()
        x = p.variable("x", len(As))
        t = p.variable("t")
        p.add_psd("lmi", A0 + sum(x[i] * As[i] for i in range(len(As))) - t * np.eye(A0.shape[0]))
        p.add_ineq("box", cp.abs(x), 5.0)
        p.maximize(t)
        return solve(p)

    a, b = run(), run()
    assert a.status == b.status
    assert abs(a.objective - b.objective) <= 1e-9


def test_no_solver_available_is_numerical_error():
    p = ConicProgram()
    x = p.variable("x")
    p.minimize(x)
    p.add_ineq("lb", -x)
    sol = solve(p, solvers=("NOT_A_SOLVER",))
    assert sol.status is Status.NUMERICAL_ERROR
    assert "no solver" in sol.message


def test_unbounded_is_not_optimal():
    p = ConicProgram()
    x = p.variable("x")
    p.minimize(x)
    assert not solve(p).ok


def test_set_defaults_validates_keys():
    old = dict(conic.SOLVE_DEFAULTS)
    try:
        conic.set_defaults(eps_feas=1e-8)
        assert conic.SOLVE_DEFAULTS["eps_feas"] == 1e-8
        with pytest.raises(KeyError):
            conic.set_defaults(tolerance=1.0)
    finally:
        conic.SOLVE_DEFAULTS.clear()
        conic.SOLVE_DEFAULTS.update(old)
