"""Coupled multi-agent LTI network model, lifting index maps and the benchmark.

Agent ``i`` evolves as ``x_i+ = sum_{j in N_i} A_ij x_j + B_i u_i + w_i``.
The lifting operators ``T_i``, ``L_i`` and ``T_{N_i}`` are never formed as 0/1
matrices; :class:`NetworkModel` exposes them as integer index arrays.
Agents are indexed from 0.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .setalg import Box, DimensionError

__all__ = [
    "AgentModel",
    "NetworkModel",
    "ContinuousModel",
    "ValidationReport",
    "MSDParams",
    "ProblemConfig",
    "euler_discretize",
    "assemble_global",
    "validate",
    "benchmark_msd",
    "PUBLISHED_X0",
    "DEFAULT_X0",
    "network_to_dict",
    "network_from_dict",
    "load_config",
    "save_config",
    "config_to_dict",
]

#: Initial condition printed with the benchmark.
PUBLISHED_X0 = np.array([-5.0, -3.0, 1.2, 1.0, -1.0, -2.0])
#: Default campaign initial condition: the printed one scaled into the
#: region from which the horizon-5 robust problem is feasible.
DEFAULT_X0 = 0.05 * PUBLISHED_X0


def _mat(a) -> np.ndarray:
    return np.atleast_2d(np.asarray(a, dtype=float))


def _is_spd(M: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.allclose(M, M.T, atol=1e-9) and np.linalg.eigvalsh(0.5 * (M + M.T)).min() > tol)


@dataclass
class AgentModel:
    """One subsystem of the network.

    Attributes:
        id: agent index ``i``.
        neighbors: ordered neighbourhood ``N_i``; must contain ``i``.  The
            order fixes the layout of the neighbourhood state ``x_{N_i}``.
        A_blocks: coupling matrices ``A_ij`` keyed by neighbour index.
        B: input matrix ``B_i``.
        state_box, input_box, dist_box: ``X_i``, ``U_i``, ``W_i``.
        Q_N: stage weight on ``x_{N_i}``.
        R: stage weight on ``u_i``.
    """

    id: int
    neighbors: tuple[int, ...]
    A_blocks: dict[int, np.ndarray]
    B: np.ndarray
    state_box: Box
    input_box: Box
    dist_box: Box
    Q_N: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.neighbors = tuple(int(j) for j in self.neighbors)
        self.A_blocks = {int(j): _mat(a) for j, a in self.A_blocks.items()}
        self.B = _mat(self.B)
        if self.B.shape[0] == 1 and self.state_box.dim > 1:
            self.B = self.B.T
        self.Q_N = _mat(self.Q_N)
        self.R = _mat(self.R)

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


class NetworkModel:
    """Collection of agents with global index maps.

    ``state_index(i)`` realises ``T_i``, ``input_index(i)`` realises ``L_i`` and
    ``nbr_index(i)`` realises ``T_{N_i}`` (concatenated in the order of
    ``agents[i].neighbors``).
    """

    def __init__(self, agents: Sequence[AgentModel]):
        self.agents = list(agents)
        for k, ag in enumerate(self.agents):
            if ag.id != k:
                raise ValueError("agents must be listed in id order starting at 0")
        self.state_offsets = np.concatenate([[0], np.cumsum([a.n for a in self.agents])]).astype(int)
        self.input_offsets = np.concatenate([[0], np.cumsum([a.m for a in self.agents])]).astype(int)
        for ag in self.agents:
            if ag.id not in ag.neighbors:
                raise ValueError(f"agent {ag.id} must belong to its own neighbourhood")
            for j in ag.neighbors:
                if not 0 <= j < len(self.agents):
                    raise ValueError(f"agent {ag.id} lists unknown neighbour {j}")
                blk = ag.A_blocks.get(j)
                if blk is None or blk.shape != (ag.n, self.agents[j].n):
                    raise DimensionError(f"A_{ag.id}{j} must be {ag.n}x{self.agents[j].n}")
            extra = set(ag.A_blocks) - set(ag.neighbors)
            if extra:
                raise DimensionError(f"agent {ag.id} has A blocks for non-neighbours {sorted(extra)}")
            nN = sum(self.agents[j].n for j in ag.neighbors)
            if ag.Q_N.shape != (nN, nN):
                raise DimensionError(f"Q_N of agent {ag.id} must be {nN}x{nN}")
            if ag.R.shape != (ag.m, ag.m):
                raise DimensionError(f"R of agent {ag.id} must be {ag.m}x{ag.m}")
            if ag.state_box.dim != ag.n or ag.dist_box.dim != ag.n or ag.input_box.dim != ag.m:
                raise DimensionError(f"box dimensions of agent {ag.id} inconsistent")

    # -- sizes -------------------------------------------------------------
    @property
    def M(self) -> int:
        return len(self.agents)

    @property
    def n(self) -> int:
        return int(self.state_offsets[-1])

    @property
    def m(self) -> int:
        return int(self.input_offsets[-1])

    # -- lifting maps ------------------------------------------------------
    def state_index(self, i: int) -> np.ndarray:
        return np.arange(self.state_offsets[i], self.state_offsets[i + 1])

    def input_index(self, i: int) -> np.ndarray:
        return np.arange(self.input_offsets[i], self.input_offsets[i + 1])

    def nbr_index(self, i: int) -> np.ndarray:
        return np.concatenate([self.state_index(j) for j in self.agents[i].neighbors])

    def own_in_nbr(self, i: int) -> np.ndarray:
        """Positions of ``x_i`` inside ``x_{N_i}``."""
        off = 0
        for j in self.agents[i].neighbors:
            if j == i:
                return np.arange(off, off + self.agents[i].n)
            off += self.agents[j].n
        raise AssertionError

    def nbr_blocks(self, i: int) -> list[tuple[int, np.ndarray]]:
        """``(j, positions of x_j inside x_{N_i})`` for every neighbour."""
        out, off = [], 0
        for j in self.agents[i].neighbors:
            out.append((j, np.arange(off, off + self.agents[j].n)))
            off += self.agents[j].n
        return out

    def A_N(self, i: int) -> np.ndarray:
        ag = self.agents[i]
        return np.hstack([ag.A_blocks[j] for j in ag.neighbors])

    # -- global objects ----------------------------------------------------
    def _cat_box(self, attr: str) -> Box:
        boxes = [getattr(a, attr) for a in self.agents]
        return Box(np.concatenate([b.lower for b in boxes]), np.concatenate([b.upper for b in boxes]))

    @property
    def X(self) -> Box:
        return self._cat_box("state_box")

    @property
    def U(self) -> Box:
        return self._cat_box("input_box")

    @property
    def W(self) -> Box:
        return self._cat_box("dist_box")

    @property
    def Q(self) -> np.ndarray:
        """Global weight ``sum_i T_{N_i}^T Q_{N_i} T_{N_i}`` (overlapping sum)."""
        Q = np.zeros((self.n, self.n))
        for i, ag in enumerate(self.agents):
            idx = self.nbr_index(i)
            Q[np.ix_(idx, idx)] += ag.Q_N
        return Q

    @property
    def R(self) -> np.ndarray:
        R = np.zeros((self.m, self.m))
        for i, ag in enumerate(self.agents):
            idx = self.input_index(i)
            R[np.ix_(idx, idx)] = ag.R
        return R

    def with_disturbance(self, W_scale: float) -> "NetworkModel":
        """Copy of the network with every ``W_i`` scaled about its centre."""
        agents = []
        for ag in self.agents:
            agents.append(AgentModel(ag.id, ag.neighbors, dict(ag.A_blocks), ag.B, ag.state_box,
                                     ag.input_box, ag.dist_box.scaled(W_scale), ag.Q_N, ag.R))
        return NetworkModel(agents)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(network_to_dict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ContinuousModel:
    """Continuous-time pair ``(A_c, B_c)`` with sampling time ``Ts`` [s]."""

    A_c: np.ndarray
    B_c: np.ndarray
    Ts: float

    def __post_init__(self):
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")


def euler_discretize(cm: ContinuousModel) -> tuple[np.ndarray, np.ndarray]:
    """Forward-Euler discretisation ``A = I + Ts A_c``, ``B = Ts B_c``."""
    A_c, B_c = _mat(cm.A_c), _mat(cm.B_c)
    if A_c.shape[0] != A_c.shape[1] or B_c.shape[0] != A_c.shape[0]:
        raise DimensionError("A_c must be square and B_c must have as many rows")
    return np.eye(A_c.shape[0]) + cm.Ts * A_c, cm.Ts * B_c


def assemble_global(net: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """``A = sum_i T_i^T A_{N_i} T_{N_i}``, ``B = sum_i T_i^T B_i L_i``."""
    A = np.zeros((net.n, net.n))
    B = np.zeros((net.n, net.m))
    for i, ag in enumerate(net.agents):
        rows = net.state_index(i)
        A[np.ix_(rows, net.nbr_index(i))] += net.A_N(i)
        B[np.ix_(rows, net.input_index(i))] += ag.B
    return A, B


@dataclass
class ValidationReport:
    """Per-check outcome of :func:`validate`; ``ok`` is the conjunction."""

    checks: dict[str, tuple[bool, str]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(v for v, _ in self.checks.values())

    def failures(self) -> list[str]:
        return [k for k, (v, _) in self.checks.items() if not v]

    def __str__(self) -> str:
        return "\n".join(f"[{'PASS' if v else 'FAIL'}] {k}: {msg}" for k, (v, msg) in self.checks.items())


def validate(net: NetworkModel) -> ValidationReport:
    """Structural checks: controllability, symmetric neighbourhoods, weights, boxes."""
    rep = ValidationReport()
    A, B = assemble_global(net)
    n = net.n
    blocks, Ak = [], np.eye(n)
    for _ in range(n):
        blocks.append(Ak @ B)
        Ak = Ak @ A
    C = np.hstack(blocks)
    s = np.linalg.svd(C, compute_uv=False)
    rank = int(np.sum(s > 1e-8 * max(1.0, s.max(initial=0.0)))) if s.size else 0
    rep.checks["controllability"] = (rank == n, f"rank {rank} of {n}")
    asym = [(a.id, j) for a in net.agents for j in a.neighbors if a.id not in net.agents[j].neighbors]
    rep.checks["neighbor_symmetry"] = (not asym, "symmetric" if not asym else f"one-way links {asym}")
    bad_w = [a.id for a in net.agents if not (_is_spd(a.Q_N) and _is_spd(a.R))]
    rep.checks["weights_pd"] = (not bad_w, "all positive definite" if not bad_w else f"agents {bad_w}")
    bad_b = [a.id for a in net.agents
             for b in (a.state_box, a.input_box, a.dist_box) if np.any(b.lower > b.upper)]
    rep.checks["boxes_nonempty"] = (not bad_b, "all non-empty" if not bad_b else f"agents {bad_b}")
    return rep


# --------------------------------------------------------------------------
# mass-spring-damper benchmark
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MSDParams:
    """Physical parameters of the three-mass chain.

    ``masses`` [kg], ``springs`` [N/m], ``dampers`` [kg/s], ``Ts`` [s].
    ``disturbance`` selects how the printed disturbance bounds become the
    discrete-time boxes ``W_i``: ``"euler"`` (default) treats them as
    continuous-time intensities and multiplies by ``Ts`` like every other
    Euler-discretised term; ``"literal"`` uses the printed numbers as the
    per-step bounds.
    """

    masses: tuple[float, float, float] = (5.0, 5.0, 5.0)
    springs: tuple[float, float, float] = (0.82, 0.81, 0.80)
    dampers: tuple[float, float] = (2.0, 1.9)
    Ts: float = 0.1
    disturbance: str = "euler"

    @classmethod
    def heavy_default(cls) -> "MSDParams":
        """Mid-range parameters ``m=(10,7.5,5)``, ``k=(1.2,1,0.8)``, ``b=(2,0.8)``."""
        return cls((10.0, 7.5, 5.0), (1.2, 1.0, 0.8), (2.0, 0.8))


#: printed per-agent bounds (position, velocity)
MSD_STATE_BOUNDS = ((10.0, 10.0), (2.0, 3.0), (3.0, 5.0))
MSD_INPUT_BOUNDS = (10.0, 1.5, 5.0)
MSD_DIST_BOUNDS = ((0.15, 0.3), (0.05, 0.1), (0.05, 0.1))
MSD_Q = (10.0, 1.0, 2.5)
MSD_R = (0.1, 0.01, 0.05)


def msd_continuous(params: MSDParams) -> ContinuousModel:
    """The 6-state continuous-time chain ``(p1, v1, p2, v2, p3, v3)``."""
    m1, m2, m3 = params.masses
    k1, k2, k3 = params.springs
    b1, b2 = params.dampers
    Ac = np.array([
        [0, 1, 0, 0, 0, 0],
        [-k1 / m1, -b1 / m1, k1 / m1, b1 / m1, 0, 0],
        [0, 0, 0, 1, 0, 0],
        [k1 / m2, b1 / m2, -(k1 + k2) / m2, -(b1 + b2) / m2, k2 / m2, b2 / m2],
        [0, 0, 0, 0, 0, 1],
        [0, 0, k2 / m3, b2 / m3, -(k2 + k3) / m3, -b2 / m3],
    ])
    Bc = np.zeros((6, 3))
    Bc[1, 0], Bc[3, 1], Bc[5, 2] = 1 / m1, 1 / m2, 1 / m3
    return ContinuousModel(Ac, Bc, params.Ts)


def benchmark_msd(params: MSDParams | None = None) -> NetworkModel:
    """Three-agent mass-spring-damper chain with neighbourhoods {0,1}, {0,1,2}, {1,2}."""
    params = params or MSDParams()
    vals = list(params.masses) + list(params.springs) + list(params.dampers) + [params.Ts]
    if any(not v > 0 for v in vals):
        raise ValueError("all physical parameters must be positive")
    if params.disturbance not in ("euler", "literal"):
        raise ValueError("disturbance must be 'euler' or 'literal'")
    A, B = euler_discretize(msd_continuous(params))
    nbrs = ((0, 1), (0, 1, 2), (1, 2))
    wscale = params.Ts if params.disturbance == "euler" else 1.0
    agents = []
    for i in range(3):
        rows = slice(2 * i, 2 * i + 2)
        blocks = {j: A[rows, 2 * j:2 * j + 2] for j in nbrs[i]}
        q = MSD_Q[i]
        agents.append(AgentModel(
            id=i,
            neighbors=nbrs[i],
            A_blocks=blocks,
            B=B[rows, i:i + 1],
            state_box=Box.symmetric(MSD_STATE_BOUNDS[i]),
            input_box=Box.symmetric([MSD_INPUT_BOUNDS[i]]),
            dist_box=Box.symmetric(wscale * np.array(MSD_DIST_BOUNDS[i])),
            Q_N=np.kron(np.eye(len(nbrs[i])), q * np.eye(2)),
            R=np.array([[MSD_R[i]]]),
        ))
    return NetworkModel(agents)


# --------------------------------------------------------------------------
# configuration files
# --------------------------------------------------------------------------

@dataclass
class ProblemConfig:
    """Everything besides the network that drives synthesis and simulation."""

    horizon: int = 5
    x0: np.ndarray | None = None
    synthesis: dict[str, Any] = field(default_factory=dict)
    admm: dict[str, Any] = field(default_factory=lambda: {
        "rho": 1.0, "max_iter": 500, "eps_primal": 1e-5, "eps_dual": 1e-5})
    conic: dict[str, Any] = field(default_factory=lambda: {"eps_feas": 1e-7, "eps_gap": 1e-7})
    simulation: dict[str, Any] = field(default_factory=lambda: {"steps": 60, "trials": 100, "mode": "UNIFORM_BOX"})


def _box_dict(b: Box) -> dict:
    return {"lower": b.lower.tolist(), "upper": b.upper.tolist()}


def _box_from(d: Mapping) -> Box:
    return Box(d["lower"], d["upper"])


def network_to_dict(net: NetworkModel) -> dict:
    return {"agents": [{
        "neighbors": list(a.neighbors),
        "A_blocks": [a.A_blocks[j].tolist() for j in a.neighbors],
        "B": a.B.tolist(),
        "state_box": _box_dict(a.state_box),
        "input_box": _box_dict(a.input_box),
        "dist_box": _box_dict(a.dist_box),
        "Q": a.Q_N.tolist(),
        "R": a.R.tolist(),
    } for a in net.agents]}


def network_from_dict(d: Mapping) -> NetworkModel:
    agents = []
    raw = d["agents"]
    sizes = [len(np.atleast_1d(a["state_box"]["lower"])) for a in raw]
    for i, a in enumerate(raw):
        nb = tuple(int(j) for j in a["neighbors"])
        blocks = a["A_blocks"]
        if isinstance(blocks, Mapping):
            blocks = {int(k): v for k, v in blocks.items()}
        else:
            if len(blocks) != len(nb):
                raise DimensionError(f"agent {i}: one A block per neighbour expected")
            blocks = dict(zip(nb, blocks))
        Q = _mat(a["Q"])
        nN = sum(sizes[j] for j in nb)
        if Q.shape == (sizes[i], sizes[i]) and nN != sizes[i]:
            Q = np.kron(np.eye(len(nb)), Q)
        agents.append(AgentModel(i, nb, blocks, _mat(a["B"]), _box_from(a["state_box"]),
                                 _box_from(a["input_box"]), _box_from(a["dist_box"]), Q, _mat(a["R"])))
    return NetworkModel(agents)


def config_to_dict(net: NetworkModel, cfg: ProblemConfig) -> dict:
    out = network_to_dict(net)
    out["horizon"] = int(cfg.horizon)
    if cfg.x0 is not None:
        out["x0"] = np.asarray(cfg.x0, dtype=float).tolist()
    out["synthesis"] = dict(cfg.synthesis)
    out["admm"] = dict(cfg.admm)
    out["conic"] = dict(cfg.conic)
    out["simulation"] = dict(cfg.simulation)
    return out


def load_config(path: str | Path) -> tuple[NetworkModel, ProblemConfig]:
    d = json.loads(Path(path).read_text())
    net = network_from_dict(d)
    cfg = ProblemConfig(horizon=int(d.get("horizon", 5)))
    if d.get("x0") is not None:
        cfg.x0 = np.asarray(d["x0"], dtype=float)
        if cfg.x0.size != net.n:
            raise DimensionError("x0 has the wrong dimension")
    cfg.synthesis.update(d.get("synthesis", {}))
    cfg.admm.update(d.get("admm", {}))
    cfg.conic.update(d.get("conic", {}))
    cfg.simulation.update(d.get("simulation", {}))
    return net, cfg


def save_config(path: str | Path, net: NetworkModel, cfg: ProblemConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(net, cfg), indent=2))
