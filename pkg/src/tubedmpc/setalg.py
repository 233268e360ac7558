"""Convex set representations and exact set arithmetic.

Everything needed for constraint tightening lives here: axis-aligned boxes,
zonotopes (centre plus generator matrix), H-polytopes and origin-centred
ellipsoids.  Pontryagin differences are computed with support functions,
which is exact for an H-polytope minus a zonotope and never requires a
vertex enumeration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "DimensionError",
    "PreconditionViolated",
    "Box",
    "Zonotope",
    "HPolytope",
    "EllipsoidSet",
    "support_zonotope",
    "linmap_zonotope",
    "minkowski_zonotope",
    "reach_tube",
    "pontryagin_diff",
    "project_product",
    "contains",
    "chebyshev_radius",
    "sample_ellipsoid",
    "sample_box",
    "sample_zonotope",
]

TOL = 1e-9


class DimensionError(ValueError):
    """Raised when set and vector/matrix dimensions disagree."""


class PreconditionViolated(ValueError):
    """Raised when an operation's structural precondition does not hold."""


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float)).ravel()


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{x : lower <= x <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, up = _vec(self.lower), _vec(self.upper)
        if lo.shape != up.shape:
            raise DimensionError("lower/upper length mismatch")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(up))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > up):
            raise ValueError("box requires lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @classmethod
    def symmetric(cls, radius: Sequence[float]) -> "Box":
        r = _vec(radius)
        return cls(-r, r)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def to_zonotope(self) -> "Zonotope":
        """Lossless conversion: one axis-aligned generator per coordinate."""
        return Zonotope(self.center, np.diag(self.radius))

    def to_hpolytope(self) -> "HPolytope":
        n = self.dim
        A = np.vstack([np.eye(n), -np.eye(n)])
        b = np.concatenate([self.upper, -self.lower])
        return HPolytope(A, b)

    def scaled(self, s: float) -> "Box":
        return Box(self.center + s * (self.lower - self.center), self.center + s * (self.upper - self.center))

    def vertices(self) -> np.ndarray:
        """All 2^n vertices (rows).  Only meant for small oracle checks."""
        n = self.dim
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T
        return self.center + signs * self.radius


@dataclass(frozen=True)
class Zonotope:
    """Zonotope ``{c + G s : |s|_inf <= 1}``; ``generators`` is n x p (columns)."""

    center: np.ndarray
    generators: np.ndarray = field(default=None)

    def __post_init__(self):
        c = _vec(self.center)
        G = self.generators
        G = np.zeros((c.size, 0)) if G is None else np.asarray(G, dtype=float)
        if G.ndim == 1:
            G = G.reshape(-1, 1)
        if G.shape[0] != c.size:
            raise DimensionError("generators must have the dimension of the center")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "generators", G)

    @classmethod
    def from_list(cls, center, generators: Sequence[Sequence[float]]) -> "Zonotope":
        c = _vec(center)
        G = np.column_stack([_vec(g) for g in generators]) if len(generators) else np.zeros((c.size, 0))
        return cls(c, G)

    @classmethod
    def point(cls, c) -> "Zonotope":
        return cls(_vec(c))

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def order(self) -> int:
        return self.generators.shape[1]

    def support(self, a) -> float:
        return support_zonotope(self, a)

    def interval_hull(self) -> Box:
        r = np.abs(self.generators).sum(axis=1)
        return Box(self.center - r, self.center + r)


@dataclass(frozen=True)
class HPolytope:
    """Polytope ``{x : A x <= b}`` with an explicit emptiness flag.

    Rows are stored as a normal matrix ``A`` (one row per constraint) and an
    offset vector ``b``.  ``empty`` is set by :func:`pontryagin_diff` when the
    tightening removes every point.
    """

    A: np.ndarray
    b: np.ndarray
    empty: bool = False

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = _vec(self.b) if np.size(self.b) else np.zeros(0)
        if A.ndim != 2:
            A = A.reshape(b.size, -1)
        if A.shape[0] != b.size:
            raise DimensionError("one offset per row required")
        if not np.all(np.isfinite(b)):
            raise ValueError("offsets must be finite")
        if A.shape[0] and np.any(np.all(A == 0, axis=1)):
            raise ValueError("normals must be nonzero")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_rows(cls, rows: Sequence[tuple], dim: int | None = None) -> "HPolytope":
        if not rows:
            return cls(np.zeros((0, dim or 0)), np.zeros(0))
        return cls(np.vstack([_vec(a) for a, _ in rows]), np.array([float(d) for _, d in rows]))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def rows(self) -> list[tuple[np.ndarray, float]]:
        return [(self.A[l].copy(), float(self.b[l])) for l in range(self.n_rows)]


@dataclass(frozen=True)
class EllipsoidSet:
    """Origin-centred ellipsoid ``{x : x^T P x <= level}``."""

    shape: np.ndarray
    level: float = 1.0

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.shape, dtype=float))
        if P.shape[0] != P.shape[1]:
            raise DimensionError("shape must be square")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-9 * max(1.0, np.abs(P).max()):
            raise ValueError("shape must be symmetric")
        P = 0.5 * (P + P.T)
        if np.linalg.eigvalsh(P).min() <= 0:
            raise ValueError("shape must be positive definite")
        if not self.level > 0:
            raise ValueError("level must be positive")
        object.__setattr__(self, "shape", P)
        object.__setattr__(self, "level", float(self.level))

    @property
    def dim(self) -> int:
        return self.shape.shape[0]

    def support(self, a) -> float:
        a = _vec(a)
        return float(np.sqrt(self.level * a @ np.linalg.solve(self.shape, a)))

    def boundary(self, n_points: int = 200) -> np.ndarray:
        """Boundary points of a 2-D ellipsoid (rows)."""
        if self.dim != 2:
            raise DimensionError("boundary sampling implemented for 2-D sets")
        th = np.linspace(0.0, 2 * np.pi, n_points)
        circle = np.vstack([np.cos(th), np.sin(th)])
        L = np.linalg.cholesky(np.linalg.inv(self.shape))
        return (np.sqrt(self.level) * L @ circle).T


# --------------------------------------------------------------------------
# zonotope arithmetic
# --------------------------------------------------------------------------

def support_zonotope(z: Zonotope, a) -> float:
    """Exact support function ``h_z(a) = a^T c + sum_j |a^T g_j|``."""
    a = _vec(a)
    if a.size != z.dim:
        raise DimensionError(f"direction has dim {a.size}, zonotope has dim {z.dim}")
    return float(a @ z.center + np.abs(a @ z.generators).sum())


def _support_many(z: Zonotope, A: np.ndarray) -> np.ndarray:
    """Row-wise support values for a matrix of directions."""
    return A @ z.center + np.abs(A @ z.generators).sum(axis=1)


def linmap_zonotope(M, z: Zonotope) -> Zonotope:
    """Exact linear image ``M z``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != z.dim:
        raise DimensionError(f"map has {M.shape[1]} columns, zonotope has dim {z.dim}")
    return Zonotope(M @ z.center, M @ z.generators)


def minkowski_zonotope(z1: Zonotope, z2: Zonotope) -> Zonotope:
    """Exact Minkowski sum: centres add, generator lists concatenate."""
    if z1.dim != z2.dim:
        raise DimensionError("Minkowski sum of zonotopes with different dimensions")
    return Zonotope(z1.center + z2.center, np.hstack([z1.generators, z2.generators]))


def reach_tube(A_K, W: Zonotope, N: int) -> list[Zonotope]:
    """Error tube ``R(t) = W ⊕ A_K W ⊕ ... ⊕ A_K^{t-1} W`` for t = 1..N.

    Returned list is indexed from zero, i.e. ``tube[t-1] == R(t)``.
    """
    A_K = np.atleast_2d(np.asarray(A_K, dtype=float))
    if A_K.shape != (W.dim, W.dim):
        raise DimensionError("A_K must be square with the dimension of W")
    if N < 1:
        raise ValueError("horizon must be >= 1")
    tube = [W]
    term = W
    for _ in range(1, N):
        term = linmap_zonotope(A_K, term)
        tube.append(minkowski_zonotope(tube[-1], term))
    return tube


# --------------------------------------------------------------------------
# polytope operations
# --------------------------------------------------------------------------

def _is_empty_general(A: np.ndarray, b: np.ndarray) -> bool:
    if A.shape[0] == 0:
        return False
    res = linprog(np.zeros(A.shape[1]), A_ub=A, b_ub=b, bounds=[(None, None)] * A.shape[1], method="highs")
    return res.status == 2


def _opposing_pairs_violated(A: np.ndarray, b: np.ndarray) -> bool:
    norms = np.linalg.norm(A, axis=1)
    U = A / norms[:, None]
    bn = b / norms
    for l in range(A.shape[0]):
        opp = np.where(np.all(np.abs(U + U[l]) <= 1e-12, axis=1))[0]
        for m in opp:
            if bn[l] + bn[m] < -TOL:
                return True
    return False


def pontryagin_diff(P: HPolytope, Z: Zonotope) -> HPolytope:
    """``P ⊖ Z``: keep the normals, subtract the support of ``Z`` from each offset.

    The result carries ``empty=True`` if opposing rows cross (box-like case)
    or a linear feasibility check fails.
    """
    if P.dim != Z.dim:
        raise DimensionError("polytope and zonotope dimensions differ")
    b = P.b - _support_many(Z, P.A) if P.n_rows else P.b.copy()
    empty = P.empty or _opposing_pairs_violated(P.A, b) or _is_empty_general(P.A, b)
    return HPolytope(P.A.copy(), b, empty=bool(empty))


def project_product(P: HPolytope, coords: Sequence[int]) -> HPolytope:
    """Restrict a Cartesian-product polytope to a coordinate subset.

    Every row must be supported either entirely inside ``coords`` or entirely
    outside; rows inside are kept with their normals restricted.
    """
    coords = list(coords)
    inside = np.zeros(P.dim, dtype=bool)
    inside[coords] = True
    keep = []
    for l in range(P.n_rows):
        nz = np.abs(P.A[l]) > 0
        if np.all(inside[nz]):
            keep.append(l)
        elif np.any(inside[nz]):
            raise PreconditionViolated(f"row {l} straddles the coordinate split")
    A = P.A[np.ix_(keep, coords)] if keep else np.zeros((0, len(coords)))
    return HPolytope(A, P.b[keep], empty=P.empty)


SetLike = Union[Box, Zonotope, HPolytope, EllipsoidSet]


def contains(S: SetLike, x, tol: float = TOL) -> bool:
    """Closed-set membership with absolute tolerance ``tol``."""
    x = _vec(x)
    if x.size != S.dim:
        raise DimensionError(f"point has dim {x.size}, set has dim {S.dim}")
    if isinstance(S, Box):
        return bool(np.all(x >= S.lower - tol) and np.all(x <= S.upper + tol))
    if isinstance(S, HPolytope):
        if S.empty:
            return False
        return bool(np.all(S.A @ x <= S.b + tol))
    if isinstance(S, EllipsoidSet):
        return bool(x @ S.shape @ x <= S.level + tol)
    if isinstance(S, Zonotope):
        return _zonotope_contains(S, x, tol)
    raise TypeError(f"unsupported set type {type(S).__name__}")


def _zonotope_contains(z: Zonotope, x: np.ndarray, tol: float) -> bool:
    d = x - z.center
    G = z.generators
    if G.shape[1] == 0:
        return bool(np.all(np.abs(d) <= tol))
    # axis-aligned (box) zonotope: closed-form H-description
    if np.count_nonzero(G) == np.count_nonzero(np.any(G != 0, axis=0)) and np.all(
        np.count_nonzero(G, axis=0) <= 1
    ):
        r = np.abs(G).sum(axis=1)
        return bool(np.all(np.abs(d) <= r + tol))
    # general case: find s with G s = d, |s|_inf <= 1 (minimise |s|_inf)
    p = G.shape[1]
    c = np.zeros(p + 1)
    c[-1] = 1.0
    A_eq = np.hstack([G, np.zeros((G.shape[0], 1))])
    A_ub = np.vstack([np.hstack([np.eye(p), -np.ones((p, 1))]), np.hstack([-np.eye(p), -np.ones((p, 1))])])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(2 * p), A_eq=A_eq, b_eq=d,
                  bounds=[(None, None)] * p + [(0, None)], method="highs")
    return bool(res.status == 0 and res.x[-1] <= 1.0 + tol)


def chebyshev_radius(P: HPolytope) -> float:
    """Radius of the largest Euclidean ball inside ``P`` (negative/0 if empty)."""
    if P.n_rows == 0:
        return float("inf")
    norms = np.linalg.norm(P.A, axis=1)
    n = P.dim
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([P.A, norms[:, None]])
    res = linprog(c, A_ub=A_ub, b_ub=P.b, bounds=[(None, None)] * n + [(None, None)], method="highs")
    if res.status == 3:
        return float("inf")
    if res.status != 0:
        return -float("inf")
    return float(res.x[-1])


def sample_ellipsoid(E: EllipsoidSet, k: int, rng: np.random.Generator, boundary_frac: float = 0.5) -> np.ndarray:
    """``k`` points (rows) of ``E``: a ``boundary_frac`` share on the boundary, the rest uniform inside."""
    n = E.dim
    z = rng.standard_normal((k, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    nb = int(round(boundary_frac * k))
    radii = np.ones(k)
    radii[nb:] = rng.random(k - nb) ** (1.0 / n)
    z *= radii[:, None] * np.sqrt(E.level)
    C = np.linalg.cholesky(E.shape)  # P = C C^T, x = C^{-T} z gives x^T P x = |z|^2
    return np.linalg.solve(C.T, z.T).T


def sample_box(B: Box, k: int, rng: np.random.Generator, vertex_frac: float = 0.5) -> np.ndarray:
    """``k`` points (rows) of ``B``: a ``vertex_frac`` share at random vertices, the rest uniform."""
    nv = int(round(vertex_frac * k))
    s = rng.uniform(-1.0, 1.0, (k, B.dim))
    s[:nv] = np.sign(s[:nv]) + (s[:nv] == 0)
    return B.center + s * B.radius


def sample_zonotope(z: Zonotope, k: int, rng: np.random.Generator, vertex_frac: float = 0.5) -> np.ndarray:
    """Points of ``z`` from generator coefficients (vertex coefficients for a share)."""
    s = rng.uniform(-1.0, 1.0, (k, z.order))
    nv = int(round(vertex_frac * k))
    s[:nv] = np.sign(s[:nv]) + (s[:nv] == 0)
    return z.center + s @ z.generators.T
