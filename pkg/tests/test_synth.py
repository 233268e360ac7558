import itertools

import numpy as np
import pytest

from systems import decoupled_pair, scalar_net
from tubedmpc.model import MSDParams, assemble_global, benchmark_msd
from tubedmpc.setalg import chebyshev_radius, contains, reach_tube
from tubedmpc.synth import (
    LocalGrid,
    SynthesisBundle,
    SynthesisError,
    local_rpi_violations,
    rpi_violations,
    synth_global_gain,
    synth_local_gains,
    synth_terminal,
    synthesize,
    terminal_certificate,
    tighten_sequences,
)


# ---------------------------------------------------------------- global gain

def test_global_gain_uncontrolled_scalar_contains_minimal_interval():
    net = scalar_net(0.5, 0.0)
    g = synth_global_gain(net, 0.5)
    # |x| <= w/(1-|a|) is the minimal invariant interval; Z must contain it
    r_min = 0.1 / (1 - 0.5)
    # the certificate is tight here (the interval is the boundary of Z), so allow solver accuracy
    assert contains(g.Z, [r_min], tol=1e-5) and contains(g.Z, [-r_min], tol=1e-5)


def _slmi_min_S(a_k, tau1, w=0.1):
    """Smallest S certified by the scalar S-procedure at multiplier tau1 (tau2 = 1 - tau1).

    (a x + w)^2 <= S on {x^2 <= S} x {w^2 <= w_max^2}: Schur on [[tau1 S, 0, a S],
    [0, tau2, w_max], [a S, w_max, S]] gives S (1 - a^2/tau1) >= w_max^2 / tau2.
    """
    if a_k ** 2 >= tau1:
        return np.inf
    return w ** 2 / ((1 - tau1) * (1 - a_k ** 2 / tau1))


def test_global_gain_scalar_integrator_vs_grid_oracle():
    net = scalar_net(1.0, 1.0)
    g = synth_global_gain(net, 0.5)
    assert abs(1 + g.K[0, 0]) < 1
    assert g.P[0, 0] >= 1.0 - 1e-9  # Z ⊆ X = [-1, 1]
    Ks = np.linspace(-1.9, -0.1, 1801)
    feasible = [(_slmi_min_S(1 + K, 0.5), K) for K in Ks if _slmi_min_S(1 + K, 0.5) <= 1 and K ** 2 * _slmi_min_S(1 + K, 0.5) <= 1]
    S_oracle = min(feasible)[0]
    S_lmi = 1.0 / g.P[0, 0]
    assert abs(S_lmi - S_oracle) <= 0.1 * S_oracle
    # the exact (non-S-procedure) minimal invariant interval is never larger than the certified one
    assert (0.1 / (1 - abs(1 + g.K[0, 0]))) ** 2 <= S_lmi * (1 + 1e-6)


def test_global_gain_rejects_bad_tau1(net):
    with pytest.raises(ValueError):
        synth_global_gain(net, 1.0)


def test_global_gain_benchmark(net, bundle_global, rng):
    A, B = assemble_global(net)
    A_K = bundle_global.A_K(net)
    assert max(abs(np.linalg.eigvals(A_K))) < 1 - 1e-9
    assert rpi_violations(A_K, bundle_global.P, net.W, 10_000, rng) == 0


def test_global_gain_infeasible_for_literal_disturbance():
    net = benchmark_msd(MSDParams(disturbance="literal"))
    with pytest.raises(SynthesisError) as exc:
        synth_global_gain(net, 0.5, verify_samples=0)
    assert exc.value.code == "INFEASIBLE"


# ---------------------------------------------------------------- local gains

def test_local_gains_decoupled_reduce_to_own_state():
    net = decoupled_pair()
    res = synth_local_gains(net, verify_samples=2000)
    for i in range(2):
        own = net.own_in_nbr(i)
        other = np.setdiff1d(np.arange(4), own)
        assert np.abs(res.K_N[i][:, other]).max() <= 1e-3 * np.abs(res.K_N[i][:, own]).max()
    assert local_rpi_violations(net, res.K_N, res.P, 2000, np.random.default_rng(1)) == [0, 0]


def test_local_gains_benchmark(net, bundle_local, rng):
    assert bundle_local.K_N is not None
    assert local_rpi_violations(net, bundle_local.K_N, bundle_local.P, 10_000, rng) == [0, 0, 0]
    assert max(abs(np.linalg.eigvals(bundle_local.A_K(net)))) < 1 - 1e-9


def test_local_gains_all_grid_infeasible(net):
    grid = LocalGrid(pairs=((0.99, 0.99),), tau_tilde=(0.99,), input_own=(0.99,))
    with pytest.raises(SynthesisError) as exc:
        synth_local_gains(net, grid, verify_samples=0)
    assert exc.value.code == "INFEASIBLE_ALL_GRID"
    assert exc.value.details and all(isinstance(r, str) for _, r in exc.value.details)


def test_local_grid_multipliers(net):
    g = LocalGrid()
    taus = g.multipliers(net, [(0.05, 0.9)] * 3)
    assert taus[1] == {0: pytest.approx(0.025), 1: 0.9, 2: pytest.approx(0.025)}
    assert g.multipliers(net, [(0.6, 0.6)] * 3) is None
    assert LocalGrid(tau_nbr=0.3).multipliers(net, [(0.1, 0.5)] * 3) is None


def test_local_grid_enumerates_uniform_first():
    g = LocalGrid(pairs=((0.1, 0.8), (0.2, 0.7)), tau_tilde=(1.0,), input_own=(0.5,))
    pts = [a for a, _, _ in g.points(2)]
    assert pts[:2] == [((0.1, 0.8),) * 2, ((0.2, 0.7),) * 2]
    assert len(pts) == 4


# ---------------------------------------------------------------- terminal

def test_terminal_single_agent(rng):
    net = scalar_net(1.1, 1.0)
    term = synth_terminal(net, lam=None)
    assert np.linalg.eigvalsh(term.Gamma[0]).max() <= 1e-8
    AK = net.A_N(0) + net.agents[0].B @ term.K_f[0]
    P = term.P_f[0]
    for x in rng.normal(size=(1000, 1)):
        u = term.K_f[0] @ x
        dec = (AK @ x) @ P @ (AK @ x) - x @ P @ x
        assert dec <= -(x @ x + 1.0 * u @ u) + 1e-9 * (1 + x @ x)


def test_terminal_decoupled_gammas_nonpositive():
    net = decoupled_pair(linked=False)
    term = synth_terminal(net)
    cert = terminal_certificate(net, term, n_samples=2000)
    assert cert["gamma_sum_max_eig"] <= 1e-8
    assert cert["relaxed_max"] <= 1e-8
    # zero coupling: each relaxation is negative semidefinite on its own
    for G in term.Gamma:
        assert np.linalg.eigvalsh(G).max() <= 1e-8


@pytest.mark.parametrize("which", ["global", "local"])
def test_terminal_certificate_benchmark(net, bundle_global, bundle_local, which):
    b = bundle_global if which == "global" else bundle_local
    from tubedmpc.synth import TerminalResult

    cert = terminal_certificate(net, TerminalResult(b.P_f, b.K_f, b.Gamma, 1.0), n_samples=10_000,
                                rng=np.random.default_rng(3))
    assert cert["relaxed_max"] <= 1e-8
    assert cert["gamma_sum_max_eig"] <= 1e-8
    for P in b.P_f:
        assert np.linalg.eigvalsh(P).min() > 0


# ---------------------------------------------------------------- tightening

def test_tighten_zero_disturbance():
    net = scalar_net(0.5, 1.0, w=0.0)
    t = tighten_sequences(net, np.zeros((1, 1)), 4)
    for Xt, Ut in zip(t.X_bar, t.U_bar):
        np.testing.assert_allclose(Xt.b, 1.0)
        np.testing.assert_allclose(Ut.b, 1.0)


def test_tighten_scalar_geometric():
    net = scalar_net(0.5, 1.0)
    t = tighten_sequences(net, np.zeros((1, 1)), 3)
    np.testing.assert_allclose(t.X_bar[2].b, 0.85)
    np.testing.assert_allclose(t.X_bar[1].b, 0.9)


def test_tighten_empty_reports_t_and_row():
    net = scalar_net(0.9, 1.0, w=0.3)
    with pytest.raises(SynthesisError) as exc:
        tighten_sequences(net, np.zeros((1, 1)), 6)
    assert exc.value.code == "EMPTY_TIGHTENED_SET"
    # 0.3 * (1 + 0.9 + 0.81 + 0.729) = 1.0287 > 1 first at t = 4
    assert exc.value.details["t"] == 4 and exc.value.details["set"] == "X"


def test_tighten_benchmark_vertex_oracle(net, bundle_global, rng):
    N = bundle_global.N
    tube = reach_tube(bundle_global.A_K(net), net.W.to_zonotope(), N)
    X = net.X
    for t in range(1, N + 1):
        R = tube[t - 1]
        # the vertex of R(t) extreme in +-e_i is c + G sign(+-G_i); these are the binding vertices of a box
        V = [R.center + R.generators @ np.sign(s * R.generators[i]) for i in range(net.n) for s in (1, -1)]
        V += [R.center + R.generators @ rng.choice([-1.0, 1.0], R.order) for _ in range(20)]
        Xt = bundle_global.tightened_X[t]
        for _ in range(1000):
            x = rng.uniform(X.lower, X.upper)
            assert contains(Xt, x, tol=0.0) == all(contains(X, x + v, tol=0.0) for v in V)


def test_tightened_sets_nested_and_nonempty(bundle_global, bundle_local):
    for b in (bundle_global, bundle_local):
        for seq in (b.tightened_X, b.tightened_U):
            for t in range(len(seq)):
                assert chebyshev_radius(seq[t]) > 0
                if t:
                    assert np.all(seq[t].b <= seq[t - 1].b + 1e-12)


def test_synthesize_ten_times_disturbance_is_empty_set():
    net = benchmark_msd().with_disturbance(10.0)
    with pytest.raises(SynthesisError) as exc:
        synthesize(net, 5, verify_samples=0)
    assert exc.value.code == "EMPTY_TIGHTENED_SET"
    assert {"t", "set", "row"} <= set(exc.value.details)


# ---------------------------------------------------------------- bundle I/O

def test_bundle_round_trip(tmp_path, bundle_global, bundle_local):
    for b in (bundle_global, bundle_local):
        path = tmp_path / f"{b.mode}.json"
        b.save(path)
        c = SynthesisBundle.load(path)
        np.testing.assert_array_equal(c.K, b.K)
        for P, Q in zip(c.P_f, b.P_f):
            np.testing.assert_array_equal(P, Q)
        for s1, s2 in zip(c.tightened_X, b.tightened_X):
            np.testing.assert_array_equal(s1.b, s2.b)
        assert c.to_dict() == b.to_dict()
