"""Offline synthesis: tube gains, RPI certificates, terminal ingredients, tightening.

The pipeline mirrors the offline algorithm of the method:

1. a tube gain, either one global ``K`` (:func:`synth_global_gain`) or
   neighbourhood gains ``K_{N_i}`` (:func:`synth_local_gains`);
2. the error tube and tightened constraint sequences
   (:func:`tighten_sequences`);
3. separable quadratic terminal costs and gains (:func:`synth_terminal`).

:func:`synthesize` runs all three and packs the result into a
:class:`SynthesisBundle` that round-trips through JSON.

Every LMI is re-verified by eigenvalues inside :func:`tubedmpc.conic.solve`
and the RPI claims are additionally checked by Monte-Carlo sampling.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import cvxpy as cp
import numpy as np

from . import conic
from .conic import ConicProgram, Status
from .model import NetworkModel, assemble_global
from .setalg import (
    Box,
    EllipsoidSet,
    HPolytope,
    Zonotope,
    linmap_zonotope,
    minkowski_zonotope,
    pontryagin_diff,
    project_product,
    reach_tube,
    sample_box,
    sample_ellipsoid,
    support_zonotope,
)

__all__ = [
    "SynthesisError",
    "GainResult",
    "LocalGainResult",
    "LocalGrid",
    "TerminalResult",
    "Tightening",
    "SynthesisBundle",
    "ellipsoid_of_box",
    "synth_global_gain",
    "synth_global_gain_auto",
    "synth_local_gains",
    "synth_terminal",
    "tighten_sequences",
    "synthesize",
    "rpi_violations",
    "local_rpi_violations",
    "terminal_certificate",
    "DEFAULT_TAU1_GRID",
]

DEFAULT_TAU1_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


class SynthesisError(RuntimeError):
    """Offline synthesis failure.  ``code`` is one of ``INFEASIBLE``,
    ``NUMERICAL_ERROR``, ``INFEASIBLE_ALL_GRID``, ``EMPTY_TIGHTENED_SET``."""

    def __init__(self, code: str, message: str, details: Any = None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.details = details


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def ellipsoid_of_box(box: Box) -> np.ndarray:
    """Shape ``W_ell = diag(1/(n v_i^2))`` of the ellipsoid ``{w: w^T W_ell w <= 1}``
    that contains the centred box ``|w| <= v``.  Zero-radius coordinates are
    not representable by a shape matrix; use :func:`_box_sqrt_inv` instead."""
    v = box.radius
    return np.diag(1.0 / (box.dim * v ** 2))


def _box_sqrt_inv(box: Box) -> np.ndarray:
    """``W_ell^{-1/2} = diag(sqrt(n) v)``; well defined also for degenerate boxes."""
    return np.diag(np.sqrt(box.dim) * box.radius)


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _box_rows(box: Box) -> list[tuple[np.ndarray, float]]:
    """Containment rows ``(a, d)`` for origin-centred ellipsoids in a box.

    For a set symmetric about the origin, ``a^T x <= d`` and ``-a^T x <= d``
    give the same LMI, so one row per coordinate with the tighter bound suffices."""
    rows = []
    for k in range(box.dim):
        a = np.zeros(box.dim)
        a[k] = 1.0
        rows.append((a, float(min(box.upper[k], -box.lower[k]))))
    return rows


def _status_error(sol: conic.ConicSolution, what: str) -> SynthesisError:
    code = "INFEASIBLE" if sol.status in (Status.INFEASIBLE, Status.MAX_ITER) else "NUMERICAL_ERROR"
    return SynthesisError(code, f"{what}: solver status {sol.status.value} ({sol.message})")


# --------------------------------------------------------------------------
# global tube gain
# --------------------------------------------------------------------------

@dataclass
class GainResult:
    """Global tube gain ``K = Y S^{-1}`` with RPI ellipsoid ``Z = {x: x^T P x <= 1}``."""

    K: np.ndarray
    P: np.ndarray
    tau1: float
    tau2: float
    solution: conic.ConicSolution = field(repr=False, default=None)

    @property
    def Z(self) -> EllipsoidSet:
        return EllipsoidSet(self.P, 1.0)


def synth_global_gain(net: NetworkModel, tau1: float, *, X: Box | None = None, U: Box | None = None,
                      W: Box | None = None, A: np.ndarray | None = None, B: np.ndarray | None = None,
                      verify_samples: int = 10_000, seed: int = 0, containment: bool = True) -> GainResult:
    """Minimum-trace RPI ellipsoid and tube gain for a fixed ``tau1``.

    Solves ``min trace(S)`` over ``S ≻ 0, Y, tau2 >= 0`` subject to the
    S-procedure invariance LMI, ``tau1 + tau2 <= 1`` and the containment LMIs
    ``Z ⊆ X``, ``K Z ⊆ U``.  The invariance LMI is used in the congruence-scaled form

        [[tau1 S, 0, (AS+BY)^T], [0, tau2 I, W^{-1/2}], [AS+BY, W^{-1/2}, S]] ⪰ 0,

    which is the Schur complement of ``(A_K x + w)^T P (A_K x + w) <= 1``
    under ``x^T P x <= 1`` and ``w^T W w <= 1``.  ``containment=False`` drops
    the ``Z ⊆ X``, ``K Z ⊆ U`` rows (used only to diagnose infeasibility).
    """
    if not 0.0 < tau1 < 1.0:
        raise ValueError("tau1 must lie in (0, 1)")
    if A is None or B is None:
        A, B = assemble_global(net)
    X = X or net.X
    U = U or net.U
    W = W or net.W
    n, m = B.shape
    Wmh = _box_sqrt_inv(W)

    p = ConicProgram("global_gain")
    S = p.variable("S", (n, n), symmetric=True)
    Y = p.variable("Y", (m, n))
    tau2 = p.variable("tau2", nonneg=True)
    AS = A @ S + B @ Y
    Z = np.zeros((n, n))
    p.add_psd("rpi", cp.bmat([[tau1 * S, Z, AS.T], [Z, tau2 * np.eye(n), Wmh], [AS, Wmh, S]]))
    p.add_ineq("tau_sum", tau1 + tau2, 1.0)
    p.add_psd("S_pd", S - 1e-9 * np.eye(n))
    for l, (a, d) in enumerate(_box_rows(X) if containment else []):
        p.add_psd(f"state_row_{l}", cp.bmat([[np.array([[d ** 2]]), (a @ S)[None, :]], [(S @ a)[:, None], S]]))
    for l, (h, g) in enumerate(_box_rows(U) if containment else []):
        p.add_psd(f"input_row_{l}", cp.bmat([[np.array([[g ** 2]]), (h @ Y)[None, :]], [(Y.T @ h)[:, None], S]]))
    p.minimize(cp.trace(S))
    sol = conic.solve(p)
    if not sol.ok:
        raise _status_error(sol, f"global gain LMI at tau1={tau1}")
    Sv = _sym(sol["S"])
    K = sol["Y"] @ np.linalg.inv(Sv)
    P = _sym(np.linalg.inv(Sv))
    res = GainResult(K, P, float(tau1), float(sol["tau2"]), sol)
    rho = max(abs(np.linalg.eigvals(A + B @ K)))
    if not rho < 1 - 1e-9:
        raise SynthesisError("NUMERICAL_ERROR", f"A+BK not Schur (spectral radius {rho:.6f})")
    if verify_samples:
        viol = rpi_violations(A + B @ K, P, W, verify_samples, np.random.default_rng(seed))
        if viol:
            raise SynthesisError("NUMERICAL_ERROR", f"Monte-Carlo RPI check failed ({viol} exits)")
    return res


def synth_global_gain_auto(net: NetworkModel, tau1: float | None = None,
                           grid: Sequence[float] = DEFAULT_TAU1_GRID, **kw) -> GainResult:
    """Try the configured ``tau1`` first, then the grid, keeping the minimum-trace result."""
    tried: list[tuple[float, str]] = []
    if tau1 is not None:
        try:
            return synth_global_gain(net, tau1, **kw)
        except SynthesisError as e:
            tried.append((tau1, e.code))
    best = None
    for t in grid:
        try:
            r = synth_global_gain(net, float(t), **kw)
        except SynthesisError as e:
            tried.append((float(t), e.code))
            continue
        if best is None or np.trace(np.linalg.inv(r.P)) < np.trace(np.linalg.inv(best.P)):
            best = r
    if best is None:
        raise SynthesisError("INFEASIBLE", "no tau1 in the grid admits a global tube gain", tried)
    return best


def rpi_violations(A_K: np.ndarray, P: np.ndarray, W: Box, k: int, rng: np.random.Generator,
                   tol: float = conic.PSD_TOL) -> int:
    """Number of sampled ``(x ∈ Z, w ∈ W)`` pairs with ``A_K x + w`` outside ``Z``.

    ``tol`` is the slack on ``x^T P x <= 1``; it matches the eigenvalue
    tolerance of the LMI re-verification, since a minimum-trace solution is
    tight wherever the S-procedure is lossless (e.g. scalar systems).
    """
    x = sample_ellipsoid(EllipsoidSet(P), k, rng)
    w = sample_box(W, k, rng)
    xp = x @ A_K.T + w
    return int(np.sum(np.einsum("ij,jk,ik->i", xp, P, xp) > 1.0 + tol))


# --------------------------------------------------------------------------
# local tube gains
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalGrid:
    """Search space for the bilinear multipliers of the neighbourhood-gain LMIs.

    Every agent ``i`` receives a pair ``(tau_bar_i, tau_bar_ii)`` from
    ``pairs``: the disturbance multiplier and the own-state multiplier.  The
    other neighbours share the remainder, ``tau_bar_ij = (1 - tau_bar_i -
    tau_bar_ii) / (|N_i| - 1)``, unless ``tau_nbr`` fixes it (a larger
    ``tau_bar_ij`` only relaxes the LMI, so the remainder is the best
    admissible value).  Input multipliers are ``tau_tilde_ijp = tt * g_ip *
    f_ij`` with ``f_ii = input_own`` and the rest split evenly, so their sum
    is ``tt * g_ip <= g_ip``.

    Points are enumerated as: for each ``(tt, input_own)``, first the
    assignments giving every agent the same pair, then (if ``per_agent``)
    the remaining combinations of the product over agents.
    """

    pairs: tuple[tuple[float, float], ...] = ((0.02, 0.95), (0.05, 0.9), (0.03, 0.93), (0.05, 0.92),
                                              (0.08, 0.88), (0.1, 0.85), (0.1, 0.7), (0.2, 0.6))
    tau_nbr: float | None = None
    tau_tilde: tuple[float, ...] = (1.0, 0.9, 0.7)
    input_own: tuple[float, ...] = (0.8, 0.5)
    per_agent: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "LocalGrid":
        d = dict(d)
        if "pairs" in d:
            d["pairs"] = tuple(tuple(float(v) for v in pr) for pr in d["pairs"])
        for k in ("tau_tilde", "input_own"):
            if k in d:
                d[k] = tuple(float(v) for v in np.atleast_1d(d[k]))
        return cls(**d)

    def points(self, M: int):
        for tt, fo in itertools.product(self.tau_tilde, self.input_own):
            uniform = [(pr,) * M for pr in self.pairs]
            yield from ((a, tt, fo) for a in uniform)
            if self.per_agent and M > 1:
                for a in itertools.product(self.pairs, repeat=M):
                    if len(set(a)) > 1:
                        yield a, tt, fo

    def multipliers(self, net: NetworkModel, assignment) -> list[dict[int, float]] | None:
        """Per agent ``{j: tau_bar_ij}`` (own block included), or None if some sum exceeds one."""
        out = []
        for i, a in enumerate(net.agents):
            tw, to = assignment[i]
            others = [j for j in a.neighbors if j != i]
            if min(tw, to) <= 0:
                return None
            if self.tau_nbr is None:
                if tw + to > 1.0 + 1e-12 or (others and tw + to >= 1.0):
                    return None
                t = (1.0 - tw - to) / len(others) if others else 0.0
            else:
                t = self.tau_nbr
                if t <= 0 or tw + to + len(others) * t > 1.0 + 1e-12:
                    return None
            out.append({j: (to if j == i else t) for j in a.neighbors})
        return out


@dataclass
class LocalGainResult:
    """Neighbourhood gains ``K_{N_i}`` and local RPI shapes ``P_i``."""

    K_N: list[np.ndarray]
    P: list[np.ndarray]
    grid_point: dict
    failures: list[tuple[tuple, str]] = field(default_factory=list)
    solution: conic.ConicSolution = field(repr=False, default=None)

    @property
    def Z(self) -> list[EllipsoidSet]:
        return [EllipsoidSet(P, 1.0) for P in self.P]

    def assembled_K(self, net: NetworkModel) -> np.ndarray:
        """``K = sum_i L_i^T K_{N_i} T_{N_i}``."""
        K = np.zeros((net.m, net.n))
        for i in range(net.M):
            K[np.ix_(net.input_index(i), net.nbr_index(i))] += self.K_N[i]
        return K


def _local_program(net: NetworkModel, tws: Sequence[float], taus: Sequence[dict[int, float]], tt_frac: float,
                   input_own: float) -> ConicProgram:
    p = ConicProgram("local_gains")
    S = [p.variable(f"S{i}", (a.n, a.n), symmetric=True) for i, a in enumerate(net.agents)]
    for i, ag in enumerate(net.agents):
        nN = len(net.nbr_index(i))
        G = p.variable(f"G{i}", (nN, nN))
        Y = p.variable(f"Y{i}", (ag.m, nN))
        AN = net.A_N(i)
        blocks = net.nbr_blocks(i)
        # sum_j S_ij / tau_bar_ij with S_ij = S_j embedded at the j-th neighbour block
        tau = taus[i]
        Pi = cp.bmat([[S[j] / tau[j] if r == c else np.zeros((net.agents[j].n, net.agents[jc].n))
                       for c, (jc, _) in enumerate(blocks)] for r, (j, _) in enumerate(blocks)])
        core = G + G.T - Pi
        Wmh = _box_sqrt_inv(ag.dist_box)
        n = ag.n
        p.add_psd(f"rpi_{i}", cp.bmat([
            [tws[i] * np.eye(n), Wmh, np.zeros((n, nN))],
            [Wmh, S[i], AN @ G + ag.B @ Y],
            [np.zeros((nN, n)), (AN @ G + ag.B @ Y).T, core],
        ]))
        p.add_psd(f"S_pd_{i}", S[i] - 1e-9 * np.eye(n))
        for l, (a, d) in enumerate(_box_rows(ag.state_box)):
            p.add_psd(f"state_{i}_{l}", cp.bmat([[np.array([[d ** 2]]), (a @ S[i])[None, :]],
                                                 [(S[i] @ a)[:, None], S[i]]]))
        for l, (h, g) in enumerate(_box_rows(ag.input_box)):
            k = len(blocks)
            frac = {j: (1.0 if k == 1 else input_own if j == i else (1.0 - input_own) / (k - 1)) for j, _ in blocks}
            Pt = cp.bmat([[S[j] / (tt_frac * g * frac[j]) if r == c else np.zeros((net.agents[j].n, net.agents[jc].n))
                           for c, (jc, _) in enumerate(blocks)] for r, (j, _) in enumerate(blocks)])
            p.add_psd(f"input_{i}_{l}", cp.bmat([[np.array([[g]]), (h @ Y)[None, :]],
                                                 [(Y.T @ h)[:, None], G + G.T - Pt]]))
    p.minimize(sum(cp.trace(s) for s in S))
    return p


def synth_local_gains(net: NetworkModel, grid: LocalGrid | None = None, *, verify_samples: int = 10_000,
                      seed: int = 0) -> LocalGainResult:
    """Neighbourhood tube gains from the coupled local LMIs, grid-searching the multipliers.

    For each admissible grid point the LMIs of all agents are solved jointly
    (``S_j`` is shared by every neighbourhood containing ``j``).  The first
    point whose solution passes eigenvalue re-verification, the Monte-Carlo
    local RPI check and the Schur test of the assembled closed loop is
    returned.
    """
    grid = grid or LocalGrid()
    failures: list[tuple[dict, str]] = []
    A, B = assemble_global(net)
    for assignment, tt, fo in grid.points(net.M):
        pt = {"pairs": [list(a) for a in assignment], "tau_tilde": tt, "input_own": fo}
        if not (0 < tt <= 1.0 and 0 < fo < 1.0):
            failures.append((pt, "need 0 < tau_tilde fraction <= 1 and 0 < input_own < 1"))
            continue
        taus = grid.multipliers(net, assignment)
        if taus is None:
            failures.append((pt, "multiplier sum > 1"))
            continue
        prog = _local_program(net, [a[0] for a in assignment], taus, tt, fo)
        sol = conic.solve(prog)
        if not sol.ok:
            failures.append((pt, f"solver {sol.status.value}"))
            continue
        K_N, P = [], []
        for i in range(net.M):
            K_N.append(sol[f"Y{i}"] @ np.linalg.inv(sol[f"G{i}"]))
            P.append(_sym(np.linalg.inv(_sym(sol[f"S{i}"]))))
        res = LocalGainResult(K_N, P, pt, failures, sol)
        K = res.assembled_K(net)
        rho = max(abs(np.linalg.eigvals(A + B @ K)))
        if not rho < 1 - 1e-9:
            failures.append((pt, f"assembled closed loop not Schur ({rho:.4f})"))
            continue
        if verify_samples:
            viol = local_rpi_violations(net, res.K_N, res.P, verify_samples, np.random.default_rng(seed))
            if any(viol):
                failures.append((pt, f"Monte-Carlo local RPI exits {viol}"))
                continue
        return res
    raise SynthesisError("INFEASIBLE_ALL_GRID", "no grid point yields verified local gains", failures)


def local_rpi_violations(net: NetworkModel, K_N: Sequence[np.ndarray], P: Sequence[np.ndarray], k: int,
                         rng: np.random.Generator, tol: float = conic.PSD_TOL) -> list[int]:
    """Per-agent count of sampled exits ``x_i+ ∉ Z_i`` with neighbours in their ``Z_j``."""
    out = []
    for i, ag in enumerate(net.agents):
        xs = [sample_ellipsoid(EllipsoidSet(P[j]), k, rng) for j in ag.neighbors]
        xN = np.hstack(xs)
        w = sample_box(ag.dist_box, k, rng)
        AK = net.A_N(i) + ag.B @ K_N[i]
        xp = xN @ AK.T + w
        out.append(int(np.sum(np.einsum("ij,jk,ik->i", xp, P[i], xp) > 1.0 + tol)))
    return out


# --------------------------------------------------------------------------
# tightening
# --------------------------------------------------------------------------

@dataclass
class Tightening:
    """Tube and tightened constraint sequences.

    ``tube[t-1] = R(t)`` for ``t = 1..N``; ``X_bar[t]`` and ``U_bar[t]`` for
    ``t = 0..N`` (``t = N`` feeds the terminal containment conditions);
    ``X_bar_N[i][t]`` and ``U_bar_i[i][t]`` are the per-agent projections;
    ``Ebar_N[i] = T_{N_i} A_K^{N-1} W`` (zonotope) and
    ``E_N[i] = L_i L_i^T`` with ``L_i = T_{N_i} A_K^{N-1} W_ell^{-1/2}`` is the
    shape (outer-ellipsoid matrix ``{e: e = L_i s, |s| <= 1}``) of the
    ellipsoidal over-approximation.
    """

    N: int
    tube: list[Zonotope]
    X_bar: list[HPolytope]
    U_bar: list[HPolytope]
    X_bar_N: list[list[HPolytope]]
    U_bar_i: list[list[HPolytope]]
    Ebar_N: list[Zonotope]
    E_N: list[np.ndarray]
    L_ell: list[np.ndarray]


def tighten_sequences(net: NetworkModel, K: np.ndarray, N: int) -> Tightening:
    """``X̄(t) = X ⊖ R(t)``, ``Ū(t) = U ⊖ K R(t)``, projections and terminal error sets.

    ``K`` is the global gain (in neighbourhood-gain mode pass the assembled
    ``sum_i L_i^T K_{N_i} T_{N_i}``; the product structure of the boxes makes
    the global tightening coincide with per-agent tightening).
    Raises ``SynthesisError('EMPTY_TIGHTENED_SET')`` naming ``t`` and the row.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    A, B = assemble_global(net)
    A_K = A + B @ K
    Wz = net.W.to_zonotope()
    tube = reach_tube(A_K, Wz, N)
    Xp, Up = net.X.to_hpolytope(), net.U.to_hpolytope()
    X_bar, U_bar = [Xp], [Up]
    for t in range(1, N + 1):
        for name, P, Z, seq in (("X", Xp, tube[t - 1], X_bar), ("U", Up, linmap_zonotope(K, tube[t - 1]), U_bar)):
            Pt = pontryagin_diff(P, Z)
            if Pt.empty:
                row = _crossing_row(Pt)
                raise SynthesisError("EMPTY_TIGHTENED_SET", f"{name}_bar({t}) is empty (row {row})",
                                     {"t": t, "set": name, "row": row})
            seq.append(Pt)
    X_bar_N = [[project_product(Xt, net.nbr_index(i)) for Xt in X_bar] for i in range(net.M)]
    U_bar_i = [[project_product(Ut, net.input_index(i)) for Ut in U_bar] for i in range(net.M)]
    AKN1 = np.linalg.matrix_power(A_K, N - 1)
    Wmh = _box_sqrt_inv(net.W)
    Ebar, E_N, L_ell = [], [], []
    for i in range(net.M):
        T = AKN1[net.nbr_index(i), :]
        Ebar.append(linmap_zonotope(T, Wz))
        L = T @ Wmh
        L_ell.append(L)
        E_N.append(L @ L.T)
    return Tightening(N, tube, X_bar, U_bar, X_bar_N, U_bar_i, Ebar, E_N, L_ell)


def _crossing_row(P: HPolytope) -> int | None:
    norms = np.linalg.norm(P.A, axis=1)
    U = P.A / norms[:, None]
    bn = P.b / norms
    for l in range(P.n_rows):
        for m_ in range(P.n_rows):
            if np.allclose(U[m_], -U[l], atol=1e-12) and bn[l] + bn[m_] < -1e-9:
                return l
    return 0 if P.empty else None


# --------------------------------------------------------------------------
# terminal ingredients
# --------------------------------------------------------------------------

@dataclass
class TerminalResult:
    """Separable terminal cost ``V_f = sum_i x_i^T P_fi x_i`` and gains ``u_i = K_fi x_{N_i}``.

    ``Gamma[i]`` is the tightest relaxation
    ``A_Kfi^T P_fi A_Kfi - U_i^T P_fi U_i + Q_{N_i} + K_fi^T R_i K_fi``, so the
    per-agent decrease condition holds with equality and the global
    certificate is exactly ``max eig(sum_i T_{N_i}^T Gamma_i T_{N_i}) <= 0``.
    """

    P_f: list[np.ndarray]
    K_f: list[np.ndarray]
    Gamma: list[np.ndarray]
    scale: float
    design: dict[str, Any] = field(default_factory=dict)
    solution: conic.ConicSolution = field(repr=False, default=None)


def _blockdiag_expr(blocks: Sequence, sizes: Sequence[int]):
    return cp.bmat([[blocks[r] if r == c else np.zeros((sizes[r], sizes[c])) for c in range(len(blocks))]
                    for r in range(len(blocks))])


def synth_terminal(net: NetworkModel, *, state_bounds: Sequence[np.ndarray] | None = None,
                   input_bounds: Sequence[np.ndarray] | None = None, lam: float | None = 0.97,
                   rho: float = 0.98, eps: float = 1e-6) -> TerminalResult:
    """Separable quadratic terminal certificate from one global LMI.

    Linearising variables: ``E_i = scale * P_fi^{-1}``, ``Y_i = K_fi E_{N_i}``
    and ``H_i = E_{N_i} Gamma_i E_{N_i} / scale`` with
    ``E_{N_i} = blockdiag(E_j, j ∈ N_i)``.  Per agent, the congruence of the
    decrease-with-relaxation condition gives

        [[U_i^T E_i U_i + H_i, (A E + B Y)^T, E_N Q^{1/2}, Y^T R^{1/2}],
         [A E + B Y,          E_i,           0,           0          ],
         [Q^{1/2} E_N,         0,             scale I,     0          ],
         [R^{1/2} Y,           0,             0,           scale I    ]] ⪰ 0,

    and ``sum_i T_{N_i}^T H_i T_{N_i} ⪯ -eps I``.

    Optional shaping for the online terminal sets (the certificate does not
    depend on it): with ``lam`` given, the unit product
    ``{x_j^T E_j^{-1} x_j <= 1}`` is mapped by ``A_Kfi`` into the ``lam``
    level of agent ``i``'s set (multipliers ``lam*rho`` on the own block,
    ``lam*(1-rho)/(|N_i|-1)`` on each neighbour); with ``state_bounds``
    (per-agent half-widths) the unit sets lie inside those boxes; with
    ``input_bounds`` the terminal inputs over the unit product stay within
    them.  Objective: maximise ``sum_i log det E_i`` (minus a small multiple of
    ``scale``).
    """
    M = net.M
    p = ConicProgram("terminal")
    E = [p.variable(f"E{i}", (a.n, a.n), symmetric=True) for i, a in enumerate(net.agents)]
    scale = p.variable("scale", nonneg=True)
    Hsum = 0
    for i, ag in enumerate(net.agents):
        blocks = net.nbr_blocks(i)
        sizes = [net.agents[j].n for j, _ in blocks]
        nN = sum(sizes)
        EN = _blockdiag_expr([E[j] for j, _ in blocks], sizes)
        Y = p.variable(f"Y{i}", (ag.m, nN))
        H = p.variable(f"H{i}", (nN, nN), symmetric=True)
        Ui = np.zeros((ag.n, nN))
        Ui[:, net.own_in_nbr(i)] = np.eye(ag.n)
        Qh = np.linalg.cholesky(_sym(ag.Q_N)).T
        Rh = np.linalg.cholesky(_sym(ag.R)).T
        AE = net.A_N(i) @ EN + ag.B @ Y
        n, m = ag.n, ag.m
        p.add_psd(f"decrease_{i}", cp.bmat([
            [Ui.T @ E[i] @ Ui + H, AE.T, EN @ Qh.T, Y.T @ Rh.T],
            [AE, E[i], np.zeros((n, nN)), np.zeros((n, m))],
            [Qh @ EN, np.zeros((nN, n)), scale * np.eye(nN), np.zeros((nN, m))],
            [Rh @ Y, np.zeros((m, n)), np.zeros((m, nN)), scale * np.eye(m)],
        ]))
        idx = net.nbr_index(i)
        T = np.zeros((nN, net.n))
        T[np.arange(nN), idx] = 1.0
        Hsum = Hsum + T.T @ H @ T
        p.add_psd(f"E_pd_{i}", E[i] - 1e-9 * np.eye(n))
        if lam is not None:
            k = len(blocks)
            sig = [lam * rho if j == i else lam * (1 - rho) / max(k - 1, 1) for j, _ in blocks]
            if k == 1:
                sig = [lam]
            SE = _blockdiag_expr([sig[r] * E[j] for r, (j, _) in enumerate(blocks)], sizes)
            p.add_psd(f"contract_{i}", cp.bmat([[SE, AE.T], [AE, E[i]]]))
        if input_bounds is not None:
            g = np.atleast_1d(np.asarray(input_bounds[i], dtype=float))
            for r_, gr in enumerate(g):
                h = np.zeros(m)
                h[r_] = 1.0
                psi = gr / len(blocks)
                SP = _blockdiag_expr([psi * E[j] for j, _ in blocks], sizes)
                hy = (h @ Y)[None, :]
                p.add_psd(f"term_input_{i}_{r_}", cp.bmat([[SP, hy.T], [hy, np.array([[gr]])]]))
        if state_bounds is not None:
            d = np.atleast_1d(np.asarray(state_bounds[i], dtype=float))
            for r_ in range(n):
                p.add_ineq(f"term_state_{i}_{r_}", E[i][r_, r_], float(d[r_]) ** 2)
    p.add_psd("gamma_sum", -Hsum - eps * np.eye(net.n))
    p.maximize(sum(cp.log_det(e) for e in E) - 1e-3 * scale)
    sol = conic.solve(p)
    if not sol.ok:
        raise _status_error(sol, "terminal synthesis (try rescaling Q/R or relaxing lam)")
    sc = float(sol["scale"])
    P_f, K_f, Gamma = [], [], []
    for i, ag in enumerate(net.agents):
        P_f.append(_sym(sc * np.linalg.inv(_sym(sol[f"E{i}"]))))
    for i, ag in enumerate(net.agents):
        blocks = net.nbr_blocks(i)
        nN = sum(net.agents[j].n for j, _ in blocks)
        EN = np.zeros((nN, nN))
        for j, pos in blocks:
            EN[np.ix_(pos, pos)] = _sym(sol[f"E{j}"])
        K_f.append(sol[f"Y{i}"] @ np.linalg.inv(EN))
    for i in range(M):
        Gamma.append(_gamma_min(net, i, P_f, K_f))
    res = TerminalResult(P_f, K_f, Gamma, sc, {"lam": lam, "rho": rho}, sol)
    gmax = terminal_certificate(net, res)["gamma_sum_max_eig"]
    if gmax > 1e-8:
        raise SynthesisError("NUMERICAL_ERROR", f"terminal certificate fails: max eig of Gamma sum {gmax:.3e}")
    return res


def _gamma_min(net: NetworkModel, i: int, P_f: Sequence[np.ndarray], K_f: Sequence[np.ndarray]) -> np.ndarray:
    ag = net.agents[i]
    nN = len(net.nbr_index(i))
    Ui = np.zeros((ag.n, nN))
    Ui[:, net.own_in_nbr(i)] = np.eye(ag.n)
    AKf = net.A_N(i) + ag.B @ K_f[i]
    G = AKf.T @ P_f[i] @ AKf - Ui.T @ P_f[i] @ Ui + ag.Q_N + K_f[i].T @ ag.R @ K_f[i]
    return _sym(G)


def terminal_certificate(net: NetworkModel, term: TerminalResult, n_samples: int = 0,
                         rng: np.random.Generator | None = None) -> dict[str, float]:
    """Evaluate the separable terminal certificate.

    Returns the largest eigenvalue of ``sum_i T_{N_i}^T Gamma_i T_{N_i}`` and,
    if ``n_samples`` > 0, the largest sampled value of
    ``sum_i [V_fi(A_Kfi x_{N_i}) - V_fi(x_i) + l_i(x_{N_i}, K_fi x_{N_i}) - gamma_i(x_{N_i})]``
    and of the same sum without ``gamma_i`` (normalised by ``|x|^2``).
    """
    Gs = np.zeros((net.n, net.n))
    for i in range(net.M):
        idx = net.nbr_index(i)
        Gs[np.ix_(idx, idx)] += term.Gamma[i]
    out = {"gamma_sum_max_eig": float(np.linalg.eigvalsh(_sym(Gs)).max())}
    if n_samples:
        rng = rng or np.random.default_rng(0)
        x = rng.standard_normal((n_samples, net.n))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        tot_rel = np.zeros(n_samples)
        tot_dec = np.zeros(n_samples)
        for i, ag in enumerate(net.agents):
            xN = x[:, net.nbr_index(i)]
            xi = x[:, net.state_index(i)]
            AKf = net.A_N(i) + ag.B @ term.K_f[i]
            xp = xN @ AKf.T
            u = xN @ term.K_f[i].T
            val = (np.einsum("ij,jk,ik->i", xp, term.P_f[i], xp) - np.einsum("ij,jk,ik->i", xi, term.P_f[i], xi)
                   + np.einsum("ij,jk,ik->i", xN, ag.Q_N, xN) + np.einsum("ij,jk,ik->i", u, ag.R, u))
            tot_dec += val
            tot_rel += val - np.einsum("ij,jk,ik->i", xN, term.Gamma[i], xN)
        out["relaxed_max"] = float(tot_rel.max())
        out["decrease_max"] = float(tot_dec.max())
    return out


# --------------------------------------------------------------------------
# bundle
# --------------------------------------------------------------------------

def _hp_dict(P: HPolytope) -> dict:
    return {"A": P.A.tolist(), "b": P.b.tolist(), "empty": bool(P.empty), "dim": int(P.dim)}


def _hp_from(d: dict) -> HPolytope:
    A = np.asarray(d["A"], dtype=float).reshape(len(d["b"]), int(d["dim"]))
    return HPolytope(A, np.asarray(d["b"], dtype=float), empty=bool(d["empty"]))


def _z_dict(z: Zonotope) -> dict:
    return {"center": z.center.tolist(), "generators": z.generators.tolist(), "dim": int(z.dim)}


def _z_from(d: dict) -> Zonotope:
    G = np.asarray(d["generators"], dtype=float).reshape(int(d["dim"]), -1)
    return Zonotope(np.asarray(d["center"], dtype=float), G)


@dataclass
class SynthesisBundle:
    """Everything the online controller needs, produced offline.

    Attributes:
        mode: ``"GLOBAL_K"`` or ``"LOCAL_K"``.
        N: prediction horizon the tightening was computed for.
        K: global tube gain (assembled from ``K_N`` in local mode).
        K_N: neighbourhood gains (local mode) or ``None``.
        P: global RPI shape (global mode) or per-agent shapes (local mode).
        P_f, K_f, Gamma: terminal costs, terminal gains, relaxation matrices.
        tightened_X, tightened_U: ``X̄(t)``, ``Ū(t)`` for ``t = 0..N``.
        X_bar_N, U_bar_i: per-agent projections of the above.
        Ebar_N: terminal error zonotopes ``T_{N_i} A_K^{N-1} W``.
        E_N, L_ell: ellipsoidal over-approximations of ``Ebar_N`` (shape and factor).
        term_state_bounds: per-agent rows ``(a, d)`` of ``X̄(N)`` on ``x_{N_i}``.
        term_input_bounds: per-agent rows ``(h, g)`` of
            ``U_i ⊖ (L_i K R(N-1) ⊕ K_fi Ebar_N)``.
        meta: free-form provenance (tau1, grid point, terminal design).
    """

    mode: str
    N: int
    K: np.ndarray
    K_N: list[np.ndarray] | None
    P: Any
    P_f: list[np.ndarray]
    K_f: list[np.ndarray]
    Gamma: list[np.ndarray]
    tightened_X: list[HPolytope]
    tightened_U: list[HPolytope]
    X_bar_N: list[list[HPolytope]]
    U_bar_i: list[list[HPolytope]]
    Ebar_N: list[Zonotope]
    E_N: list[np.ndarray]
    L_ell: list[np.ndarray]
    term_input_bounds: list[HPolytope]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def F(self) -> list[np.ndarray]:
        """Terminal-set shapes; ``F_i = P_fi``."""
        return self.P_f

    @property
    def term_state_bounds(self) -> list[HPolytope]:
        return [seq[self.N] for seq in self.X_bar_N]

    def A_K(self, net: NetworkModel) -> np.ndarray:
        A, B = assemble_global(net)
        return A + B @ self.K

    def to_dict(self) -> dict:
        arr = lambda xs: [np.asarray(x).tolist() for x in xs]  # noqa: E731
        return {
            "mode": self.mode,
            "N": self.N,
            "K": self.K.tolist(),
            "K_N": arr(self.K_N) if self.K_N is not None else None,
            "P": np.asarray(self.P).tolist() if self.mode == "GLOBAL_K" else arr(self.P),
            "P_f": arr(self.P_f),
            "K_f": arr(self.K_f),
            "Gamma": arr(self.Gamma),
            "tightened_X": [_hp_dict(P) for P in self.tightened_X],
            "tightened_U": [_hp_dict(P) for P in self.tightened_U],
            "X_bar_N": [[_hp_dict(P) for P in seq] for seq in self.X_bar_N],
            "U_bar_i": [[_hp_dict(P) for P in seq] for seq in self.U_bar_i],
            "Ebar_N": [_z_dict(z) for z in self.Ebar_N],
            "E_N": arr(self.E_N),
            "L_ell": arr(self.L_ell),
            "term_input_bounds": [_hp_dict(P) for P in self.term_input_bounds],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisBundle":
        A = lambda xs: [np.asarray(x, dtype=float) for x in xs]  # noqa: E731
        mode = d["mode"]
        return cls(
            mode=mode,
            N=int(d["N"]),
            K=np.asarray(d["K"], dtype=float),
            K_N=A(d["K_N"]) if d.get("K_N") is not None else None,
            P=np.asarray(d["P"], dtype=float) if mode == "GLOBAL_K" else A(d["P"]),
            P_f=A(d["P_f"]),
            K_f=[np.atleast_2d(k) for k in A(d["K_f"])],
            Gamma=A(d["Gamma"]),
            tightened_X=[_hp_from(x) for x in d["tightened_X"]],
            tightened_U=[_hp_from(x) for x in d["tightened_U"]],
            X_bar_N=[[_hp_from(x) for x in seq] for seq in d["X_bar_N"]],
            U_bar_i=[[_hp_from(x) for x in seq] for seq in d["U_bar_i"]],
            Ebar_N=[_z_from(z) for z in d["Ebar_N"]],
            E_N=A(d["E_N"]),
            L_ell=[np.atleast_2d(x) for x in A(d["L_ell"])],
            term_input_bounds=[_hp_from(x) for x in d["term_input_bounds"]],
            meta=d.get("meta", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "SynthesisBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _terminal_input_bounds(net: NetworkModel, K: np.ndarray, tight: Tightening,
                           K_f: Sequence[np.ndarray]) -> list[HPolytope]:
    """Rows of ``U_i ⊖ (L_i K R(N-1) ⊕ K_fi Ebar_{N_i})`` (``R(0) = {0}``)."""
    N = tight.N
    out = []
    for i, ag in enumerate(net.agents):
        Ui = ag.input_box.to_hpolytope()
        Kz = linmap_zonotope(K[net.input_index(i), :], tight.tube[N - 2]) if N >= 2 else None
        Ez = linmap_zonotope(K_f[i], tight.Ebar_N[i])
        Z = minkowski_zonotope(Kz, Ez) if Kz is not None else Ez
        out.append(pontryagin_diff(Ui, Z))
    return out


def _diagnose_emptiness(net: NetworkModel, N: int, grid: Sequence[float], err: SynthesisError) -> None:
    """After the constrained gain LMI failed, check whether the cause is an
    empty tightened set: synthesize an RPI-only gain and tighten with it.
    Raises ``EMPTY_TIGHTENED_SET`` if so; returns silently otherwise."""
    if err.code != "INFEASIBLE":
        return
    for t in grid:
        try:
            g = synth_global_gain(net, float(t), verify_samples=0, containment=False)
        except SynthesisError:
            continue
        try:
            tighten_sequences(net, g.K, N)
        except SynthesisError as e:
            raise SynthesisError(e.code, f"{e.args[0].split(': ', 1)[1]} under the RPI-only gain "
                                 f"(constrained gain LMI infeasible for every tau1)", e.details) from err
        return


def synthesize(net: NetworkModel, N: int, *, mode: str = "GLOBAL_K", tau1: float | None = None,
               tau1_grid: Sequence[float] = DEFAULT_TAU1_GRID, local_grid: LocalGrid | None = None,
               terminal: dict[str, Any] | None = None, verify_samples: int = 10_000,
               seed: int = 0) -> SynthesisBundle:
    """Offline algorithm: tube gain, tightening, terminal ingredients.

    ``terminal`` forwards options to :func:`synth_terminal` (``lam``, ``rho``);
    the terminal sets are shaped to fit inside ``X ⊖ R(N)`` and
    ``U ⊖ K R(N-1)`` unless ``terminal={"shape": False}``.
    """
    if N < 2:
        raise ValueError("horizon must be >= 2")
    terminal = dict(terminal or {})
    meta: dict[str, Any] = {"mode": mode}
    if mode == "GLOBAL_K":
        try:
            g = synth_global_gain_auto(net, tau1, tau1_grid, verify_samples=verify_samples, seed=seed)
        except SynthesisError as err:
            _diagnose_emptiness(net, N, tau1_grid, err)
            raise
        K, K_N, P = g.K, None, g.P
        meta.update(tau1=g.tau1, tau2=g.tau2)
    elif mode == "LOCAL_K":
        lg = synth_local_gains(net, local_grid, verify_samples=verify_samples, seed=seed)
        K, K_N, P = lg.assembled_K(net), lg.K_N, lg.P
        meta.update(grid_point=dict(lg.grid_point))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    tight = tighten_sequences(net, K, N)
    shape = terminal.pop("shape", True)
    if shape:
        XN = tight.X_bar[N]
        UN1 = tight.U_bar[N - 1]
        sb = [np.minimum(XN.b[net.state_index(i)], XN.b[net.n + net.state_index(i)]) for i in range(net.M)]
        ub = [np.minimum(UN1.b[net.input_index(i)], UN1.b[net.m + net.input_index(i)]) for i in range(net.M)]
        term = synth_terminal(net, state_bounds=sb, input_bounds=ub, **terminal)
    else:
        term = synth_terminal(net, **terminal)
    meta.update(terminal=term.design, terminal_scale=term.scale)
    tib = _terminal_input_bounds(net, K, tight, term.K_f)
    for i, Pi in enumerate(tib):
        if Pi.empty or np.any(Pi.b <= 0):
            raise SynthesisError("EMPTY_TIGHTENED_SET", f"terminal input set of agent {i} is empty",
                                 {"t": N, "set": "U_term", "row": int(np.argmin(Pi.b))})
    return SynthesisBundle(mode, N, K, K_N, P, term.P_f, term.K_f, term.Gamma, tight.X_bar, tight.U_bar,
                           tight.X_bar_N, tight.U_bar_i, tight.Ebar_N, tight.E_N, tight.L_ell, tib, meta)
