import dataclasses

import numpy as np
import pytest

from systems import decoupled_pair
from tubedmpc.conic import Status
from tubedmpc.model import PUBLISHED_X0
from tubedmpc.mpc import (
    ALPHA_FLOOR,
    DMPCProblem,
    build_program,
    control_action,
    solve_admm,
    solve_centralized,
    stage_objective,
    terminal_containment_violations,
    terminal_invariance_violations,
    tube_action,
)
from tubedmpc.setalg import Zonotope, contains
from tubedmpc.synth import synthesize


@pytest.fixture(scope="module")
def robust(net, bundle_global):
    return DMPCProblem(net, bundle_global, "ROBUST")


@pytest.fixture(scope="module")
def sol0(robust, x0):
    return solve_centralized(robust, x0)


def zero_margin_bundle(net, b):
    """The bundle a zero disturbance set would produce: no tightening, no terminal error."""
    N = b.N
    return dataclasses.replace(
        b,
        tightened_X=[b.tightened_X[0]] * (N + 1),
        tightened_U=[b.tightened_U[0]] * (N + 1),
        X_bar_N=[[seq[0]] * (N + 1) for seq in b.X_bar_N],
        U_bar_i=[[seq[0]] * (N + 1) for seq in b.U_bar_i],
        Ebar_N=[Zonotope(np.zeros(z.dim), np.zeros_like(z.generators)) for z in b.Ebar_N],
        E_N=[np.zeros_like(E) for E in b.E_N],
        L_ell=[np.zeros_like(L) for L in b.L_ell],
        term_input_bounds=[net.agents[i].input_box.to_hpolytope() for i in range(net.M)],
    )


# ---------------------------------------------------------------- build_program

def test_zero_disturbance_reduces_to_nominal(net, bundle_global, x0):
    zb = zero_margin_bundle(net, bundle_global)
    r = solve_centralized(DMPCProblem(net, zb, "ROBUST"), x0)
    n = solve_centralized(DMPCProblem(net, zb, "NOMINAL"), x0)
    assert r.ok and n.ok
    assert abs(r.objective - n.objective) <= 1e-5 * max(1.0, abs(n.objective))
    # the error multipliers are free to vanish: the self multiplier costs nothing at the optimum
    np.testing.assert_allclose(r.xbar, n.xbar, atol=1e-4)


@pytest.mark.xfail(strict=True, reason="published initial state is outside the robust feasible region "
                                       "for this benchmark parametrisation; see README")
def test_published_initial_state_feasible(robust):
    assert solve_centralized(robust, np.asarray(PUBLISHED_X0, dtype=float)).ok


def test_variable_count_audit(net, bundle_global):
    # hand count for N = 5, n_i = 2, m_i = 1, |N_i| = (2, 3, 2), n_{N_i} = (4, 6, 4):
    #   xbar 6*6 + ubar 5*3 + a 3 = 54
    #   sigma_nbr 2+3+2 = 7, sigma_self 3
    #   phi (one per state row pair per neighbour) 4*2 + 6*3 + 4*2 = 34, psi 1*2 + 1*3 + 1*2 = 7
    prog = build_program(DMPCProblem(net, bundle_global, "ROBUST"))
    assert prog.n_scalar_variables() == 54 + 10 + 41
    assert build_program(DMPCProblem(net, bundle_global, "NOMINAL")).n_scalar_variables() == 54 + 7 + 41
    # ADMM block of agent 1 (three neighbours): x copies 6*6, u 5, a copies 3, sigma 3+1, phi 18, psi 3
    p = DMPCProblem(net, bundle_global, "ROBUST")
    solve_admm(p, np.zeros(net.n), max_iter=1)
    assert p._admm.agents[1].prog.n_scalar_variables() == 36 + 5 + 3 + 4 + 18 + 3


def test_invalid_controller(net, bundle_global):
    with pytest.raises(ValueError):
        DMPCProblem(net, bundle_global, "FANCY")
    with pytest.raises(ValueError):
        DMPCProblem(net, bundle_global, margin="sphere")


# ---------------------------------------------------------------- solve_centralized

def test_inside_terminal_set_small_objective(net, bundle_global, robust):
    # scale a direction so each x_i sits at 1% of agent i's terminal level at the floor-free optimum
    x = np.zeros(net.n)
    for i in range(net.M):
        idx = net.state_index(i)
        P = bundle_global.P_f[i]
        v = np.linalg.eigh(P)[1][:, 0]
        x[idx] = 1e-3 * v / np.sqrt(v @ P @ v)
    sol = solve_centralized(robust, x)
    assert sol.ok
    assert sol.objective < 1e-3
    for i in range(net.M):
        xi = sol.xbar[-1, net.state_index(i)]
        assert xi @ bundle_global.P_f[i] @ xi <= sol.alpha[i] * (1 + 1e-6) + 1e-7


def test_benchmark_state_solution(net, robust, sol0, x0):
    assert sol0.ok
    assert np.all(sol0.alpha > 0) and np.all(np.isfinite(sol0.alpha))
    assert np.all(sol0.a >= ALPHA_FLOOR - 1e-12)
    np.testing.assert_array_equal(sol0.xbar[0], x0)
    # nominal dynamics hold to 1e-7
    from tubedmpc.model import assemble_global

    A, B = assemble_global(net)
    for t in range(robust.N):
        np.testing.assert_allclose(sol0.xbar[t + 1], A @ sol0.xbar[t] + B @ sol0.ubar[t], atol=1e-7)
    assert sol0.objective == pytest.approx(stage_objective(robust, sol0.xbar, sol0.ubar), rel=1e-6, abs=1e-8)


def test_terminal_membership_consistency(net, bundle_global, sol0):
    for i in range(net.M):
        xi = sol0.xbar[-1, net.state_index(i)]
        assert xi @ bundle_global.P_f[i] @ xi <= sol0.alpha[i] + 1e-7 * max(1.0, bundle_global.meta["terminal_scale"])


def test_state_outside_X_infeasible(net, robust):
    x = np.zeros(net.n)
    x[2] = net.X.upper[2] + 0.1
    sol = solve_centralized(robust, x)
    assert sol.status is Status.INFEASIBLE


@pytest.mark.parametrize("controller", ["ROBUST", "NOMINAL"])
def test_sampled_terminal_certificates(net, bundle_global, x0, controller):
    p = DMPCProblem(net, bundle_global, controller)
    sol = solve_centralized(p, x0)
    rng = np.random.default_rng(5)
    assert terminal_invariance_violations(p, sol.alpha, 10_000, rng) == [0, 0, 0]
    assert terminal_containment_violations(p, sol.alpha, 10_000, rng) == [0, 0, 0]


def test_zonotope_margin_certificates(net, bundle_global, x0):
    p = DMPCProblem(net, bundle_global, "ROBUST", margin="zonotope")
    sol = solve_centralized(p, x0)
    assert sol.ok
    rng = np.random.default_rng(6)
    assert terminal_invariance_violations(p, sol.alpha, 10_000, rng) == [0, 0, 0]


# ---------------------------------------------------------------- ADMM

def test_admm_decoupled_converges_immediately():
    net = decoupled_pair(linked=False)
    b = synthesize(net, 3, verify_samples=2000)
    p = DMPCProblem(net, b)
    x = np.array([0.3, 0.1, -0.2, 0.05])
    a = solve_admm(p, x)
    c = solve_centralized(p, x)
    assert a.ok and a.iterations <= 2
    assert abs(a.objective - c.objective) <= 1e-4 * max(1.0, abs(c.objective))


def test_admm_rejects_bad_rho(robust, x0):
    with pytest.raises(ValueError):
        solve_admm(robust, x0, rho=0.0)


def test_admm_max_iter_flagged(net, bundle_global, x0):
    p = DMPCProblem(net, bundle_global)
    s = solve_admm(p, x0, max_iter=3)
    assert s.status is Status.MAX_ITER and s.iterations == 3
    assert "ADMM stopped" in s.message


@pytest.mark.slow
def test_admm_matches_central_benchmark(net, bundle_global, sol0, x0):
    p = DMPCProblem(net, bundle_global)
    s = solve_admm(p, x0)
    assert s.ok and s.iterations <= 500
    assert abs(s.objective - sol0.objective) / max(1.0, abs(sol0.objective)) <= 1e-4


@pytest.mark.slow
@pytest.mark.parametrize("rho", [0.1, 10.0])
def test_admm_rho_sweep(net, bundle_global, sol0, x0, rho):
    p = DMPCProblem(net, bundle_global)
    s = solve_admm(p, x0, rho=rho, max_iter=3000)
    assert s.ok
    assert abs(s.objective - sol0.objective) / max(1.0, abs(sol0.objective)) <= 1e-4


# ---------------------------------------------------------------- control laws

def test_control_action_first_input(net, sol0):
    np.testing.assert_array_equal(control_action(sol0), sol0.ubar[0])
    per_agent = control_action(sol0, net)
    assert [u.tolist() for u in per_agent] == [[v] for v in sol0.ubar[0]]
    assert contains(net.U, control_action(sol0), tol=1e-6)


def test_control_action_requires_optimal(net, robust):
    bad = solve_centralized(robust, np.full(net.n, 100.0))
    with pytest.raises(ValueError):
        control_action(bad)
    with pytest.raises(ValueError):
        tube_action(bad, np.zeros(net.n), robust.bundle)


def test_tube_action(net, bundle_global, sol0, x0):
    np.testing.assert_allclose(tube_action(sol0, x0, bundle_global), control_action(sol0), atol=0)
    d = np.linspace(-0.01, 0.01, net.n)
    np.testing.assert_allclose(tube_action(sol0, x0 + d, bundle_global), sol0.ubar[0] + bundle_global.K @ d,
                               atol=1e-14)


def test_tube_action_local_mode(net, bundle_local, x0):
    sol = solve_centralized(DMPCProblem(net, bundle_local), x0)
    d = np.linspace(0.01, -0.02, net.n)
    per = tube_action(sol, x0 + d, bundle_local, net)
    for i in range(net.M):
        expect = sol.ubar[0][net.input_index(i)] + bundle_local.K_N[i] @ d[net.nbr_index(i)]
        np.testing.assert_allclose(per[i], expect, atol=1e-14)
    np.testing.assert_allclose(np.concatenate(per), tube_action(sol, x0 + d, bundle_local), atol=1e-12)
