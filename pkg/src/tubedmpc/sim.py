"""Closed-loop simulation, disturbance generation and Monte-Carlo campaigns.

One closed-loop step measures ``x(k)``, solves the online problem (central
or ADMM), applies ``ū*(0)`` and advances the plant with ``w(k)``.  An
infeasible online problem is recorded and ends that trajectory.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .model import NetworkModel
from .mpc import DMPCProblem, control_action, solve_admm, solve_centralized
from .setalg import Box, contains
from .synth import SynthesisBundle

__all__ = [
    "DISTURBANCE_MODES",
    "DisturbanceSequence",
    "StepRecord",
    "TrajectoryRecord",
    "sample_disturbance",
    "make_disturbances",
    "step_plant",
    "run_closed_loop",
    "run_campaign",
    "export_csv",
    "read_csv",
    "export_plot",
    "csv_header",
]

DISTURBANCE_MODES = ("UNIFORM_BOX", "VERTEX", "ZERO")


def sample_disturbance(W: Box, mode: str, rng: np.random.Generator) -> np.ndarray:
    """One disturbance sample from ``W``.

    ``UNIFORM_BOX``: uniform on the box; ``VERTEX``: uniform over the 2^n
    vertices; ``ZERO``: the zero vector (no randomness consumed).
    """
    if mode == "ZERO":
        return np.zeros(W.dim)
    if mode == "UNIFORM_BOX":
        return rng.uniform(W.lower, W.upper)
    if mode == "VERTEX":
        return np.where(rng.random(W.dim) < 0.5, W.lower, W.upper)
    raise ValueError(f"unknown disturbance mode {mode!r}")


@dataclass
class DisturbanceSequence:
    """A reproducible realisation ``w(0..T-1)``; every sample lies in ``W``."""

    seed: int
    mode: str
    samples: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)


def make_disturbances(W: Box, mode: str, T: int, seed: int, scale: float = 1.0) -> DisturbanceSequence:
    """``T`` samples from ``W`` (optionally scaled about its centre by ``scale``)."""
    rng = np.random.default_rng(seed)
    Ws = W.scaled(scale) if scale != 1.0 else W
    s = np.array([sample_disturbance(Ws, mode, rng) for _ in range(T)]).reshape(T, W.dim)
    return DisturbanceSequence(seed, mode, s)


def step_plant(net: NetworkModel, x, u, w) -> np.ndarray:
    """``x_i+ = A_{N_i} x_{N_i} + B_i u_i + w_i`` evaluated agent by agent."""
    x, u, w = (np.asarray(v, dtype=float).ravel() for v in (x, u, w))
    if x.size != net.n or w.size != net.n or u.size != net.m:
        raise ValueError("dimension mismatch in step_plant")
    xp = np.empty(net.n)
    for i, ag in enumerate(net.agents):
        xp[net.state_index(i)] = net.A_N(i) @ x[net.nbr_index(i)] + ag.B @ u[net.input_index(i)] + w[net.state_index(i)]
    return xp


@dataclass
class StepRecord:
    k: int
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    feasible: bool
    objective: float
    admm_iters: int


@dataclass
class TrajectoryRecord:
    """Closed-loop log.  ``steps[k]`` holds ``x(k)``, the applied ``u(k)``, ``w(k)``
    and the terminal levels ``α(k)``; an infeasible step carries NaN inputs."""

    n: int
    m: int
    M: int
    steps: list[StepRecord] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return all(s.feasible for s in self.steps)

    def states(self) -> np.ndarray:
        return np.array([s.x for s in self.steps]).reshape(len(self.steps), self.n)

    def inputs(self) -> np.ndarray:
        return np.array([s.u for s in self.steps]).reshape(len(self.steps), self.m)

    def alphas(self) -> np.ndarray:
        return np.array([s.alpha for s in self.steps]).reshape(len(self.steps), self.M)


def run_closed_loop(net: NetworkModel, bundle: SynthesisBundle, controller: str, T_steps: int,
                    dist: DisturbanceSequence, x0: np.ndarray, solver: str = "CENTRAL", margin: str = "ellipsoid",
                    admm: dict | None = None, problem: DMPCProblem | None = None) -> TrajectoryRecord:
    """Run the receding-horizon loop for ``T_steps`` steps.

    The applied input is ``ū*(0)`` clipped into ``U`` (actuator saturation);
    the largest clip, bounded by the solver tolerance, is logged as
    ``metadata["max_input_clip"]``.

    ``problem`` lets callers reuse a compiled :class:`DMPCProblem` across runs
    (it must match ``controller`` and ``margin``).
    """
    if solver not in ("CENTRAL", "ADMM"):
        raise ValueError(f"unknown solver {solver!r}")
    if len(dist) < T_steps:
        raise ValueError("disturbance sequence shorter than the simulation")
    p = problem or DMPCProblem(net, bundle, controller, margin)
    admm = dict(admm or {})
    rec = TrajectoryRecord(net.n, net.m, net.M, metadata={
        "seed": dist.seed, "mode": dist.mode, "controller": controller, "solver": solver, "margin": margin,
        "model_hash": net.fingerprint(), "x0": np.asarray(x0, dtype=float).tolist()})
    x = np.asarray(x0, dtype=float).copy()
    U = net.U
    max_clip = 0.0
    for k in range(T_steps):
        sol = solve_admm(p, x, **admm) if solver == "ADMM" else solve_centralized(p, x)
        w = dist.samples[k]
        if not sol.ok:
            rec.steps.append(StepRecord(k, x.copy(), np.full(net.m, np.nan), w.copy(), np.full(net.M, np.nan),
                                        False, float("nan"), int(sol.iterations if solver == "ADMM" else 0)))
            rec.metadata["stop_reason"] = f"{sol.status.value} at k={k}: {sol.message}"
            break
        # the plan meets U to the solver re-verification tolerance; the actuator saturates exactly
        u_plan = control_action(sol)
        u = np.clip(u_plan, U.lower, U.upper)
        max_clip = max(max_clip, float(np.max(np.abs(u - u_plan), initial=0.0)))
        rec.steps.append(StepRecord(k, x.copy(), u.copy(), w.copy(), sol.alpha.copy(), True, float(sol.objective),
                                    int(sol.iterations if solver == "ADMM" else 0)))
        x = step_plant(net, x, u, w)
    rec.metadata["final_state"] = x.tolist()
    rec.metadata["max_input_clip"] = max_clip
    return rec


def _stage_cost(net: NetworkModel, x: np.ndarray, u: np.ndarray) -> float:
    return float(x @ net.Q @ x + u @ net.R @ u)


def run_campaign(net: NetworkModel, bundle: SynthesisBundle, controllers: Sequence[str], trials: int,
                 T_steps: int, seed0: int, x0: np.ndarray, mode: str = "UNIFORM_BOX", solver: str = "CENTRAL",
                 margin: str = "ellipsoid", W_scale: float = 1.0, admm: dict | None = None,
                 keep_records: bool = False) -> dict[str, Any]:
    """Monte-Carlo comparison on seeds ``seed0 .. seed0+trials-1``.

    Each controller sees the same disturbance sequence for a given seed.
    Reported per controller: infeasibility rate (share of trials with an
    infeasible step), constraint-violation rate (share of feasible steps with
    ``x ∉ X`` or ``u ∉ U``), mean closed-loop cost ``sum_k l(x, u)`` over fully
    feasible trials, and per-agent ``α`` statistics.  The report contains no
    timing information, so identical inputs give identical bytes.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    problems = {c: DMPCProblem(net, bundle, c, margin) for c in controllers}
    X, U = net.X, net.U
    report: dict[str, Any] = {"trials": trials, "T_steps": T_steps, "seed0": seed0, "mode": mode,
                              "solver": solver, "margin": margin, "W_scale": W_scale,
                              "x0": np.asarray(x0, dtype=float).tolist(), "controllers": {}}
    records: dict[str, list[TrajectoryRecord]] = {c: [] for c in controllers}
    for c in controllers:
        per_trial = []
        n_inf = viol = feas_steps = 0
        costs, alphas = [], []
        for s in range(seed0, seed0 + trials):
            dist = make_disturbances(net.W, mode, T_steps, s, W_scale)
            rec = run_closed_loop(net, bundle, c, T_steps, dist, x0, solver, margin, admm, problems[c])
            ok_steps = [st for st in rec.steps if st.feasible]
            v = sum(1 for st in ok_steps if not (contains(X, st.x) and contains(U, st.u)))
            viol += v
            feas_steps += len(ok_steps)
            infeasible = not rec.feasible
            n_inf += infeasible
            cost = sum(_stage_cost(net, st.x, st.u) for st in ok_steps)
            if not infeasible:
                costs.append(cost)
            if ok_steps:
                alphas.append(np.array([st.alpha for st in ok_steps]))
            per_trial.append({"seed": s, "feasible": not infeasible, "steps": len(rec.steps),
                              "first_infeasible": next((st.k for st in rec.steps if not st.feasible), None),
                              "violations": v, "cost": cost, "max_input_clip": rec.metadata["max_input_clip"]})
            if keep_records:
                records[c].append(rec)
        A = np.vstack(alphas) if alphas else np.zeros((0, net.M))
        report["controllers"][c] = {
            "infeasibility_rate": n_inf / trials,
            "infeasible_trials": n_inf,
            "constraint_violation_rate": viol / feas_steps if feas_steps else 0.0,
            "mean_cost": float(np.mean(costs)) if costs else None,
            "alpha_min": A.min(axis=0).tolist() if A.size else None,
            "alpha_max": A.max(axis=0).tolist() if A.size else None,
            "alpha_mean": A.mean(axis=0).tolist() if A.size else None,
            "per_trial": per_trial,
        }
    if keep_records:
        report["_records"] = records
    return report


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def csv_header(n: int, m: int, M: int) -> list[str]:
    return (["k"] + [f"x_{j + 1}" for j in range(n)] + [f"u_{j + 1}" for j in range(m)]
            + [f"w_{j + 1}" for j in range(n)] + [f"alpha_{j + 1}" for j in range(M)]
            + ["feasible", "objective", "admm_iters"])


def _g(v: float) -> str:
    return format(float(v), ".17g")


def export_csv(rec: TrajectoryRecord, path: str | Path) -> None:
    """Write the record with 17 significant digits (lossless for float64)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(csv_header(rec.n, rec.m, rec.M))
        for s in rec.steps:
            wr.writerow([s.k] + [_g(v) for v in s.x] + [_g(v) for v in s.u] + [_g(v) for v in s.w]
                        + [_g(v) for v in s.alpha] + [int(s.feasible), _g(s.objective), s.admm_iters])


def read_csv(path: str | Path) -> TrajectoryRecord:
    """Parse a CSV written by :func:`export_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    n = sum(h.startswith("x_") for h in head)
    m = sum(h.startswith("u_") for h in head)
    M = sum(h.startswith("alpha_") for h in head)
    rec = TrajectoryRecord(n, m, M)
    for r in rows[1:]:
        v = r
        o = 1
        x = np.array(v[o:o + n], dtype=float); o += n
        u = np.array(v[o:o + m], dtype=float); o += m
        w = np.array(v[o:o + n], dtype=float); o += n
        a = np.array(v[o:o + M], dtype=float); o += M
        rec.steps.append(StepRecord(int(v[0]), x, u, w, a, bool(int(v[o])), float(v[o + 1]), int(v[o + 2])))
    return rec


def export_plot(rec: TrajectoryRecord, path: str | Path, net: NetworkModel, bundle: SynthesisBundle) -> None:
    """Vector-graphics summary: states, terminal ellipses at the final α, α traces."""
    from .plotting import plot_trajectory

    plot_trajectory(rec, path, net, bundle)
