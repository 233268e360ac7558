"""Online robust DMPC with adaptive terminal sets: central reference and consensus ADMM.

The online problem at state ``x(k)`` is

    min  sum_i [ sum_t l_i(x̄_{N_i}(t), ū_i(t)) + x̄_i(N)^T P_fi x̄_i(N) ]
    s.t. x̄(t+1) = A x̄(t) + B ū(t),   x̄(0) = x(k),
         x̄(t) ∈ X̄(t), ū(t) ∈ Ū(t)                     (t = 0..N-1),
         x̄_i(N) ∈ Ω_fi(α_i) = {x_i : x_i^T F_i x_i <= α_i},

with the terminal levels ``α_i`` chosen online subject to three groups of
LMIs in ``a_i = α_i^{1/2}``: robust invariance of the product of terminal
sets under ``A_Kfi`` plus the terminal error margin, containment in the
state/input constraints, and the Schur form of the terminal constraint.

Numerically the program works with the normalised shapes ``F_i / s`` where
``s`` is the scale returned by the terminal synthesis, so all levels are of
order one; reported ``alpha`` values are in the units of ``F_i = P_fi``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import cvxpy as cp
import numpy as np

from . import conic
from .conic import ConicProgram, Status
from .model import NetworkModel, assemble_global
from .setalg import EllipsoidSet, HPolytope, sample_ellipsoid, sample_zonotope
from .synth import SynthesisBundle

__all__ = [
    "DMPCProblem",
    "DMPCSolution",
    "build_program",
    "solve_centralized",
    "solve_admm",
    "control_action",
    "tube_action",
    "terminal_invariance_violations",
    "terminal_containment_violations",
    "stage_objective",
    "ALPHA_FLOOR",
    "REG",
]

ALPHA_FLOOR = 1e-9  # lower bound on α_i^{1/2}
REG = 1e-9  # weight of the α-regularisation term


@dataclass
class DMPCProblem:
    """One online problem instance.

    ``controller`` is ``"ROBUST"`` (tightened constraints, error margin in
    the terminal invariance) or ``"NOMINAL"`` (original constraints, no
    margin).  ``margin`` selects how the terminal error set
    ``T_{N_i} A_K^{N-1} W`` enters the invariance LMI: ``"ellipsoid"`` uses
    the outer ellipsoid with one multiplier per agent, ``"zonotope"`` uses
    the exact generators with one multiplier each.
    """

    net: NetworkModel
    bundle: SynthesisBundle
    controller: str = "ROBUST"
    margin: str = "ellipsoid"
    current_state: np.ndarray | None = None
    _central: "_CentralProgram | None" = field(default=None, repr=False)
    _admm: "_AdmmState | None" = field(default=None, repr=False)

    def __post_init__(self):
        if self.controller not in ("ROBUST", "NOMINAL"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.margin not in ("ellipsoid", "zonotope"):
            raise ValueError(f"unknown margin {self.margin!r}")
        if self.bundle.N < 2:
            raise ValueError("horizon must be >= 2")
        if self.bundle.K.shape != (self.net.m, self.net.n):
            raise ValueError("bundle and network dimensions disagree")

    @property
    def N(self) -> int:
        return self.bundle.N

    @property
    def robust(self) -> bool:
        return self.controller == "ROBUST"

    @property
    def fscale(self) -> float:
        return float(self.bundle.meta.get("terminal_scale", 1.0))

    def F_norm(self, i: int) -> np.ndarray:
        return self.bundle.P_f[i] / self.fscale

    def state_rows(self, t: int) -> HPolytope:
        return self.bundle.tightened_X[t] if self.robust else self.bundle.tightened_X[0]

    def input_rows(self, t: int) -> HPolytope:
        return self.bundle.tightened_U[t] if self.robust else self.bundle.tightened_U[0]

    def term_state_rows(self, i: int) -> HPolytope:
        """Rows on ``x_{N_i}`` that every point of the terminal product must satisfy."""
        if self.robust:
            return self.bundle.X_bar_N[i][self.N]
        return self.bundle.X_bar_N[i][0]

    def term_input_rows(self, i: int) -> HPolytope:
        if self.robust:
            return self.bundle.term_input_bounds[i]
        return self.bundle.U_bar_i[i][0]


@dataclass
class DMPCSolution:
    """Optimal nominal plan and terminal levels.

    ``xbar`` is ``(N+1) x n`` (global stacking; ``x̄_{N_i}`` are row slices),
    ``ubar`` is ``N x m``, ``alpha`` are the terminal levels in units of
    ``F_i`` and ``a`` their normalised square roots used inside the program.
    """

    status: Status
    xbar: np.ndarray | None = None
    ubar: np.ndarray | None = None
    alpha: np.ndarray | None = None
    a: np.ndarray | None = None
    multipliers: dict[str, np.ndarray] = field(default_factory=dict)
    objective: float = float("nan")
    iterations: int = 0
    residuals: dict[str, float] = field(default_factory=dict)
    solve_time: float = 0.0
    message: str = ""
    mode: str = "GLOBAL_K"

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


# --------------------------------------------------------------------------
# shared LMI builders
# --------------------------------------------------------------------------

def _bd(blocks: Sequence, sizes: Sequence[int]):
    return cp.bmat([[blocks[r] if r == c else np.zeros((sizes[r], sizes[c])) for c in range(len(blocks))]
                    for r in range(len(blocks))])


def _dedup_rows(P: HPolytope) -> list[tuple[np.ndarray, float]]:
    """Merge ``±a`` rows keeping the smaller offset (sets here are origin-symmetric)."""
    out: list[tuple[np.ndarray, float]] = []
    for a, d in P.rows:
        k = int(np.flatnonzero(a)[0])
        a_n = a * np.sign(a[k])
        for r, (b, e) in enumerate(out):
            if np.allclose(a_n, b, atol=1e-12):
                out[r] = (b, min(e, d))
                break
        else:
            out.append((a_n, d))
    return out


def _terminal_blocks(prog: ConicProgram, p: DMPCProblem, i: int, a_of, xN_final, tag: str = "") -> None:
    """Add the robust invariance, containment and terminal-membership LMIs for agent ``i``.

    ``a_of(j)`` returns the (scalar affine) ``α_j^{1/2}`` as seen by agent
    ``i``; ``xN_final`` is ``x̄_i(N)``.
    """
    net, bnd = p.net, p.bundle
    ag = net.agents[i]
    blocks = net.nbr_blocks(i)
    sizes = [net.agents[j].n for j, _ in blocks]
    nN = sum(sizes)
    k = len(blocks)
    F = [p.F_norm(j) for j, _ in blocks]
    Fi_inv = np.linalg.inv(p.F_norm(i))
    AKf = net.A_N(i) + ag.B @ bnd.K_f[i]
    D = _bd([a_of(j) * np.eye(net.agents[j].n) for j, _ in blocks], sizes)
    ai = a_of(i)
    n = ag.n

    # robust invariance of the terminal product under A_Kf plus the error margin
    s_nbr = prog.variable(f"sigma_nbr{tag}_{i}", k, nonneg=True)
    SF = _bd([s_nbr[r] * F[r] for r in range(k)], sizes)
    if p.robust:
        if p.margin == "ellipsoid":
            L = bnd.L_ell[i]
            s_self = prog.variable(f"sigma_self{tag}_{i}", 1, nonneg=True)
            Sig = s_self[0] * np.eye(L.shape[1])
        else:
            L = bnd.Ebar_N[i].generators
            s_self = prog.variable(f"sigma_self{tag}_{i}", L.shape[1], nonneg=True)
            Sig = cp.diag(s_self)
        q = L.shape[1]
        AL = AKf @ L
        M = cp.bmat([
            [SF, np.zeros((nN, q)), D @ AKf.T],
            [np.zeros((q, nN)), Sig, AL.T],
            [AKf @ D, AL, ai * Fi_inv],
        ])
        prog.add_ineq(f"inv_sum{tag}_{i}", cp.sum(s_nbr) + cp.sum(s_self), ai)
    else:
        M = cp.bmat([[SF, D @ AKf.T], [AKf @ D, ai * Fi_inv]])
        prog.add_ineq(f"inv_sum{tag}_{i}", cp.sum(s_nbr), ai)
    prog.add_psd(f"invariance{tag}_{i}", M)

    # state containment of the product of terminal sets
    for l, (abar, d) in enumerate(_dedup_rows(p.term_state_rows(i))):
        phi = prog.variable(f"phi{tag}_{i}_{l}", k, nonneg=True)
        col = D @ abar.reshape(-1, 1)
        prog.add_psd(f"term_state{tag}_{i}_{l}", cp.bmat([[_bd([phi[r] * F[r] for r in range(k)], sizes), col],
                                                          [col.T, np.array([[d]])]]))
        prog.add_ineq(f"term_state_sum{tag}_{i}_{l}", cp.sum(phi), d)
    # input containment under the terminal gain
    for l, (h, g) in enumerate(_dedup_rows(p.term_input_rows(i))):
        psi = prog.variable(f"psi{tag}_{i}_{l}", k, nonneg=True)
        col = D @ (bnd.K_f[i].T @ h).reshape(-1, 1)
        prog.add_psd(f"term_input{tag}_{i}_{l}", cp.bmat([[_bd([psi[r] * F[r] for r in range(k)], sizes), col],
                                                          [col.T, np.array([[g]])]]))
        prog.add_ineq(f"term_input_sum{tag}_{i}_{l}", cp.sum(psi), g)
    # x̄_i(N) ∈ Ω_fi(α_i) in Schur form
    xf = cp.reshape(xN_final, (n, 1), order="C")
    prog.add_psd(f"terminal{tag}_{i}", cp.bmat([[cp.reshape(ai, (1, 1), order="C"), xf.T], [xf, ai * Fi_inv]]))
    prog.add_ineq(f"alpha_floor{tag}_{i}", ALPHA_FLOOR, ai)


def _chol_T(M: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(0.5 * (M + M.T)).T


# --------------------------------------------------------------------------
# centralised reference
# --------------------------------------------------------------------------

class _CentralProgram:
    def __init__(self, p: DMPCProblem):
        net, N = p.net, p.N
        n, m = net.n, net.m
        A, B = assemble_global(net)
        prog = ConicProgram(f"dmpc_central_{p.controller.lower()}")
        x0 = prog.parameter("x0", n, value=np.zeros(n))
        X = prog.variable("xbar", (N + 1, n))
        U = prog.variable("ubar", (N, m))
        a = prog.variable("a", net.M)
        prog.add_eq("init", X[0, :], x0)
        for t in range(N):
            prog.add_eq(f"dyn_{t}", X[t + 1, :], A @ X[t, :] + B @ U[t, :])
            Xs, Us = p.state_rows(t), p.input_rows(t)
            prog.add_ineq(f"state_{t}", Xs.A @ X[t, :], Xs.b)
            prog.add_ineq(f"input_{t}", Us.A @ U[t, :], Us.b)
        for i in range(net.M):
            _terminal_blocks(prog, p, i, lambda j: a[j], X[N, net.state_index(i)])
        Qh = _chol_T(net.Q)
        Rh = _chol_T(net.R)
        Pf = np.zeros((n, n))
        for i in range(net.M):
            idx = net.state_index(i)
            Pf[np.ix_(idx, idx)] = p.bundle.P_f[i]
        Ph = _chol_T(Pf)
        cost = (cp.sum_squares(X[:N, :] @ Qh.T) + cp.sum_squares(U @ Rh.T) + cp.sum_squares(Ph @ X[N, :])
                + REG * cp.sum(a))
        prog.minimize(cost)
        self.prog, self.x0 = prog, x0


def build_program(p: DMPCProblem) -> ConicProgram:
    """Central conic program for ``p`` (cached on the instance; ``x0`` is a parameter)."""
    if p._central is None:
        p._central = _CentralProgram(p)
    if p.current_state is not None:
        p._central.x0.value = np.asarray(p.current_state, dtype=float)
    return p._central.prog


def stage_objective(p: DMPCProblem, xbar: np.ndarray, ubar: np.ndarray) -> float:
    """``sum_t x̄^T Q x̄ + ū^T R ū + sum_i x̄_i(N)^T P_fi x̄_i(N)`` (no regulariser)."""
    net, N = p.net, p.N
    val = float(np.einsum("ti,ij,tj->", xbar[:N], net.Q, xbar[:N]) + np.einsum("ti,ij,tj->", ubar, net.R, ubar))
    for i in range(net.M):
        xi = xbar[N, net.state_index(i)]
        val += float(xi @ p.bundle.P_f[i] @ xi)
    return val


def solve_centralized(p: DMPCProblem, x: np.ndarray | None = None, **solve_kw) -> DMPCSolution:
    """Solve the online problem as one conic program (the verification oracle)."""
    if x is not None:
        p.current_state = np.asarray(x, dtype=float)
    if p.current_state is None:
        raise ValueError("current_state not set")
    prog = build_program(p)
    sol = conic.solve(prog, **solve_kw)
    out = DMPCSolution(status=sol.status, iterations=sol.iterations, solve_time=sol.solve_time,
                       message=sol.message, residuals=dict(sol.residuals), mode=p.bundle.mode)
    if sol.ok:
        out.xbar = sol["xbar"]
        out.xbar[0] = p.current_state  # the initial condition is data; drop the solver's 1e-10 residue
        out.ubar = sol["ubar"]
        out.a = sol["a"]
        out.alpha = p.fscale * out.a ** 2
        out.objective = float(sol.objective)
        out.multipliers = {k: v for k, v in sol.values.items() if k not in ("xbar", "ubar", "a")}
    return out


# --------------------------------------------------------------------------
# consensus ADMM
# --------------------------------------------------------------------------

class _AgentBlock:
    """Agent ``i``'s local problem: copies of ``x̄_{N_i}``, own ``ū_i``, copies of ``a_j``."""

    def __init__(self, p: DMPCProblem, i: int, rho: float):
        net, N = p.net, p.N
        ag = net.agents[i]
        self.i = i
        self.nbrs = list(ag.neighbors)
        self.idx = net.nbr_index(i)
        nN = len(self.idx)
        own = net.own_in_nbr(i)
        prog = ConicProgram(f"admm_agent_{i}")
        self.x0 = prog.parameter("x0", nN, value=np.zeros(nN))
        self.cx = prog.parameter("cx", (N, nN), value=np.zeros((N, nN)))  # z - u for x̄(1..N)
        self.ca = prog.parameter("ca", len(self.nbrs), value=np.zeros(len(self.nbrs)))
        X = prog.variable("x", (N + 1, nN))
        U = prog.variable("u", (N, ag.m))
        a = prog.variable("a", len(self.nbrs))
        prog.add_eq("init", X[0, :], self.x0)
        AN = net.A_N(i)
        for t in range(N):
            prog.add_eq(f"dyn_{t}", X[t + 1, own], AN @ X[t, :] + ag.B @ U[t, :])
            Xs = p.bundle.X_bar_N[i][t] if p.robust else p.bundle.X_bar_N[i][0]
            Us = p.bundle.U_bar_i[i][t] if p.robust else p.bundle.U_bar_i[i][0]
            prog.add_ineq(f"state_{t}", Xs.A @ X[t, :], Xs.b)
            prog.add_ineq(f"input_{t}", Us.A @ U[t, :], Us.b)
        pos = {j: r for r, j in enumerate(self.nbrs)}
        _terminal_blocks(prog, p, i, lambda j: a[pos[j]], X[N, own])
        Qh = _chol_T(ag.Q_N)
        Rh = _chol_T(ag.R)
        Ph = _chol_T(p.bundle.P_f[i])
        f = (cp.sum_squares(X[:N, :] @ Qh.T) + cp.sum_squares(U @ Rh.T) + cp.sum_squares(Ph @ X[N, own])
             + REG * a[pos[i]])
        # only variables owned by several agents are coupled; single-owner copies carry no penalty
        owners_x = np.zeros(net.n, dtype=int)
        owners_a = np.zeros(net.M, dtype=int)
        for b in net.agents:
            owners_x[net.nbr_index(b.id)] += 1
            owners_a[list(b.neighbors)] += 1
        sx = np.flatnonzero(owners_x[self.idx] > 1)
        sa = np.flatnonzero(owners_a[self.nbrs] > 1)
        pen = 0
        if sx.size:
            pen = pen + cp.sum_squares(X[1:, sx] - self.cx[:, sx])
        if sa.size:
            pen = pen + cp.sum_squares(a[sa] - self.ca[sa])
        pen = 0.5 * rho * pen
        prog.minimize(f + pen)
        self.prog, self.X, self.U, self.a = prog, X, U, a
        self.rho = rho

    def solve(self):
        return conic.solve(self.prog)


@dataclass
class _AdmmState:
    rho: float
    agents: list[_AgentBlock]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("TUBE_DMPC_THREADS", "1")))
    except ValueError:
        return 1


def solve_admm(p: DMPCProblem, x: np.ndarray | None = None, rho: float = 1.0, eps_primal: float = 1e-5,
               eps_dual: float = 1e-5, max_iter: int = 500) -> DMPCSolution:
    """Consensus ADMM over per-agent blocks (scaled form).

    Shared quantities are the predicted states ``x̄_j(1..N)`` (copied in every
    neighbourhood containing ``j``) and the levels ``a_j`` (copied likewise).
    Each iteration solves every agent's local conic problem with the
    augmented penalty, averages the copies, and updates the scaled duals.
    Stopping uses the standard primal/dual residual tests with absolute and
    relative tolerance ``eps``.  Returns ``MAX_ITER`` with the last consensus
    iterate if the tolerances are not met, ``INFEASIBLE`` if any local problem
    is infeasible.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if x is not None:
        p.current_state = np.asarray(x, dtype=float)
    x0 = np.asarray(p.current_state, dtype=float)
    net, N = p.net, p.N
    if p._admm is None or p._admm.rho != rho:
        p._admm = _AdmmState(rho, [_AgentBlock(p, i, rho) for i in range(net.M)])
    blocks = p._admm.agents
    # consensus variables and scaled duals
    z_x = np.zeros((N, net.n))
    z_a = np.ones(net.M)
    ux = [np.zeros((N, len(b.idx))) for b in blocks]
    ua = [np.zeros(len(b.nbrs)) for b in blocks]
    counts_x = np.zeros(net.n)
    counts_a = np.zeros(net.M)
    for b in blocks:
        counts_x[b.idx] += 1
        counts_a[b.nbrs] += 1
        b.x0.value = x0[b.idx]
    yx = [None] * net.M
    ya = [None] * net.M
    uu = [None] * net.M
    pool = ThreadPoolExecutor(_workers()) if _workers() > 1 else None
    status, it, r_norm, s_norm = Status.MAX_ITER, 0, np.inf, np.inf
    total_time = 0.0
    try:
        for it in range(1, max_iter + 1):
            for k, b in enumerate(blocks):
                b.cx.value = z_x[:, b.idx] - ux[k]
                b.ca.value = z_a[b.nbrs] - ua[k]
            sols = list(pool.map(_AgentBlock.solve, blocks)) if pool else [b.solve() for b in blocks]
            for k, (b, s) in enumerate(zip(blocks, sols)):
                total_time += s.solve_time
                if s.status is Status.INFEASIBLE:
                    return DMPCSolution(Status.INFEASIBLE, iterations=it, solve_time=total_time,
                                        message=f"agent {b.i} subproblem infeasible", mode=p.bundle.mode)
                if not s.ok:
                    return DMPCSolution(Status.NUMERICAL_ERROR, iterations=it, solve_time=total_time,
                                        message=f"agent {b.i}: {s.message}", mode=p.bundle.mode)
                yx[k], ya[k], uu[k] = s["x"][1:], s["a"], s["u"]
            zx_old, za_old = z_x.copy(), z_a.copy()
            acc_x = np.zeros((N, net.n))
            acc_a = np.zeros(net.M)
            for k, b in enumerate(blocks):
                acc_x[:, b.idx] += yx[k] + ux[k]
                acc_a[b.nbrs] += ya[k] + ua[k]
            z_x = acc_x / counts_x
            z_a = acc_a / counts_a
            r2 = s2 = ny2 = nz2 = nu2 = 0.0
            for k, b in enumerate(blocks):
                rx = yx[k] - z_x[:, b.idx]
                ra = ya[k] - z_a[b.nbrs]
                ux[k] += rx
                ua[k] += ra
                r2 += float(np.sum(rx ** 2) + np.sum(ra ** 2))
                s2 += float(np.sum((z_x[:, b.idx] - zx_old[:, b.idx]) ** 2) + np.sum((z_a[b.nbrs] - za_old[b.nbrs]) ** 2))
                ny2 += float(np.sum(yx[k] ** 2) + np.sum(ya[k] ** 2))
                nz2 += float(np.sum(z_x[:, b.idx] ** 2) + np.sum(z_a[b.nbrs] ** 2))
                nu2 += float(np.sum(ux[k] ** 2) + np.sum(ua[k] ** 2))
            r_norm, s_norm = np.sqrt(r2), rho * np.sqrt(s2)
            dim = sum(yx[k].size + ya[k].size for k in range(net.M))
            eps_pri = np.sqrt(dim) * eps_primal + eps_primal * max(np.sqrt(ny2), np.sqrt(nz2))
            eps_dua = np.sqrt(dim) * eps_dual + eps_dual * rho * np.sqrt(nu2)
            if r_norm <= eps_pri and s_norm <= eps_dua:
                status = Status.OPTIMAL
                break
    finally:
        if pool:
            pool.shutdown()
    xbar = np.vstack([x0, z_x])
    ubar = np.zeros((N, net.m))
    for k, b in enumerate(blocks):
        ubar[:, net.input_index(b.i)] = uu[k]
    out = DMPCSolution(status=status, xbar=xbar, ubar=ubar, a=z_a.copy(), alpha=p.fscale * z_a ** 2,
                       iterations=it, solve_time=total_time, mode=p.bundle.mode,
                       residuals={"primal": float(r_norm), "dual": float(s_norm)})
    out.objective = stage_objective(p, xbar, ubar) + REG * float(np.sum(z_a))
    if status is not Status.OPTIMAL:
        out.message = f"ADMM stopped after {it} iterations (r={r_norm:.2e}, s={s_norm:.2e})"
    return out


# --------------------------------------------------------------------------
# control laws
# --------------------------------------------------------------------------

def control_action(sol: DMPCSolution, net: NetworkModel | None = None) -> np.ndarray | list[np.ndarray]:
    """First planned input ``ū*(0)``; per agent if ``net`` is given, else the global vector."""
    if not sol.ok:
        raise ValueError(f"control_action on a {sol.status.value} solution")
    u = np.array(sol.ubar[0], dtype=float)
    if net is None:
        return u
    return [u[net.input_index(i)] for i in range(net.M)]


def tube_action(sol: DMPCSolution, x: np.ndarray, bundle: SynthesisBundle,
                net: NetworkModel | None = None) -> np.ndarray | list[np.ndarray]:
    """``u_i = ū*_i(0) + L_i K (x - x̄*(0))``.

    In neighbourhood-gain mode this equals ``ū*_i(0) + K_{N_i}(x_{N_i} - x̄*_{N_i}(0))``
    because ``K`` is assembled from the ``K_{N_i}``; the local form is used
    when ``net`` is supplied so the computation stays agent-local.
    """
    if not sol.ok:
        raise ValueError(f"tube_action on a {sol.status.value} solution")
    dx = np.asarray(x, dtype=float) - sol.xbar[0]
    if net is not None and bundle.K_N is not None:
        return [sol.ubar[0][net.input_index(i)] + bundle.K_N[i] @ dx[net.nbr_index(i)] for i in range(net.M)]
    u = sol.ubar[0] + bundle.K @ dx
    if net is None:
        return u
    return [u[net.input_index(i)] for i in range(net.M)]


# --------------------------------------------------------------------------
# sampled certificates
# --------------------------------------------------------------------------

def terminal_invariance_violations(p: DMPCProblem, alpha: np.ndarray, k: int, rng: np.random.Generator,
                                   rtol: float = 1e-6) -> list[int]:
    """Per agent, sampled ``(x_j ∈ Ω_fj(α_j), e ∈ Ē_{N_i})`` with ``A_Kfi(x_{N_i}+e) ∉ Ω_fi(α_i)``.

    Half of the neighbourhood samples lie on the ellipsoid boundaries and half
    of the error samples at zonotope vertices.  With a nominal controller the
    error term is omitted.
    """
    net, bnd = p.net, p.bundle
    out = []
    for i, ag in enumerate(net.agents):
        xs = [sample_ellipsoid(EllipsoidSet(bnd.P_f[j], float(alpha[j])), k, rng) for j in ag.neighbors]
        xN = np.hstack(xs)
        if p.robust:
            xN = xN + sample_zonotope(bnd.Ebar_N[i], k, rng)
        AKf = net.A_N(i) + ag.B @ bnd.K_f[i]
        xp = xN @ AKf.T
        v = np.einsum("ij,jk,ik->i", xp, bnd.P_f[i], xp)
        out.append(int(np.sum(v > alpha[i] * (1 + rtol))))
    return out


def terminal_containment_violations(p: DMPCProblem, alpha: np.ndarray, k: int, rng: np.random.Generator,
                                    tol: float = 1e-7) -> list[int]:
    """Per agent, sampled points of the terminal product violating state rows or ``K_fi``-mapped input rows."""
    net, bnd = p.net, p.bundle
    out = []
    for i, ag in enumerate(net.agents):
        xN = np.hstack([sample_ellipsoid(EllipsoidSet(bnd.P_f[j], float(alpha[j])), k, rng) for j in ag.neighbors])
        Xs, Ut = p.term_state_rows(i), p.term_input_rows(i)
        bad = np.any(xN @ Xs.A.T > Xs.b + tol, axis=1)
        u = xN @ bnd.K_f[i].T
        bad |= np.any(u @ Ut.A.T > Ut.b + tol, axis=1)
        out.append(int(np.sum(bad)))
    return out
