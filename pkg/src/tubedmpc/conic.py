"""Declarative conic programs with a uniform, independently verified solve contract.

A :class:`ConicProgram` collects named variables, tagged affine equalities,
inequalities, PSD blocks and second-order cones, plus a convex objective.
Quadratic objective terms are lowered to second-order-cone epigraphs by the
modelling layer (cvxpy), so a single conic solver serves both the LMI
synthesis problems and the online DMPC problem.

:func:`solve` never trusts the solver's status alone: every PSD block is
eigendecomposed and every (in)equality re-evaluated at the returned point.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Any, Iterable

import cvxpy as cp
import numpy as np

__all__ = ["Status", "ConicProgram", "ConicSolution", "solve", "PSD_TOL", "DEFAULT_SOLVERS"]

#: minimum eigenvalue accepted for a PSD block at a returned solution
PSD_TOL = 1e-6


class Status(str, enum.Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    MAX_ITER = "MAX_ITER"
    NUMERICAL_ERROR = "NUMERICAL_ERROR"


@dataclass
class _Tagged:
    tag: str
    kind: str  # "eq", "ineq", "psd", "soc"
    exprs: tuple
    constraint: Any


@dataclass
class ConicSolution:
    """Outcome of :func:`solve`.

    ``residuals`` holds ``primal`` (largest re-evaluated constraint
    violation), ``min_psd_eig`` (smallest eigenvalue over all PSD blocks) and
    ``worst_tag`` (the constraint that produced the larger of the two).
    """

    status: Status
    values: dict[str, np.ndarray] = field(default_factory=dict)
    objective: float = float("nan")
    residuals: dict[str, Any] = field(default_factory=dict)
    iterations: int = 0
    solve_time: float = 0.0
    solver: str = ""
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


class ConicProgram:
    """Container for a convex conic program built from affine pieces.

    Variables and parameters are cvxpy objects registered under a name;
    constraints are added through ``add_*`` methods carrying a tag that is
    reported when re-verification fails.  The underlying ``cp.Problem`` is
    built once and reused, so re-solving after changing parameter values
    benefits from cvxpy's compilation cache.
    """

    def __init__(self, name: str = "program"):
        self.name = name
        self.variables: dict[str, cp.Variable] = {}
        self.parameters: dict[str, cp.Parameter] = {}
        self._cons: list[_Tagged] = []
        self._objective: cp.Expression | None = None
        self._sense = "min"
        self._problem: cp.Problem | None = None

    # -- declarations ------------------------------------------------------
    def variable(self, name: str, shape: int | tuple = (), *, symmetric: bool = False,
                 nonneg: bool = False) -> cp.Variable:
        if name in self.variables:
            raise KeyError(f"variable {name!r} already declared")
        if isinstance(shape, int):
            shape = (shape,)
        kw = {"name": name}
        if symmetric:
            kw["symmetric"] = True
        if nonneg:
            kw["nonneg"] = True
        v = cp.Variable(shape, **kw)
        self.variables[name] = v
        self._problem = None
        return v

    def parameter(self, name: str, shape: int | tuple = (), value=None) -> cp.Parameter:
        if isinstance(shape, int):
            shape = (shape,)
        p = cp.Parameter(shape, name=name, value=value)
        self.parameters[name] = p
        self._problem = None
        return p

    def _check_vars(self, *exprs) -> None:
        known = {id(v) for v in self.variables.values()}
        for e in exprs:
            if isinstance(e, cp.Expression):
                for v in e.variables():
                    if id(v) not in known:
                        raise ValueError(f"constraint references undeclared variable {v.name()}")

    def _add(self, tag: str, kind: str, exprs: tuple, con) -> None:
        self._check_vars(*exprs)
        self._cons.append(_Tagged(tag, kind, exprs, con))
        self._problem = None

    def add_eq(self, tag: str, lhs, rhs=0.0) -> None:
        self._add(tag, "eq", (lhs, rhs), lhs == rhs)

    def add_ineq(self, tag: str, lhs, rhs=0.0) -> None:
        """Add ``lhs <= rhs`` (elementwise)."""
        self._add(tag, "ineq", (lhs, rhs), lhs <= rhs)

    def add_psd(self, tag: str, M) -> None:
        """Add ``M ⪰ 0``; ``M`` is symmetrised so the block is symmetric by construction."""
        Ms = 0.5 * (M + M.T)
        self._add(tag, "psd", (Ms,), Ms >> 0)

    def add_soc(self, tag: str, t, x) -> None:
        """Add ``||x||_2 <= t``."""
        self._add(tag, "soc", (t, x), cp.SOC(t, cp.vec(x) if x.ndim > 1 else x))

    def minimize(self, expr) -> None:
        self._check_vars(expr)
        self._objective, self._sense = expr, "min"
        self._problem = None

    def maximize(self, expr) -> None:
        self._check_vars(expr)
        self._objective, self._sense = expr, "max"
        self._problem = None

    # -- introspection -----------------------------------------------------
    @property
    def constraints(self) -> list[_Tagged]:
        return list(self._cons)

    def tags(self) -> list[str]:
        return [c.tag for c in self._cons]

    def n_scalar_variables(self) -> int:
        return int(sum(v.size for v in self.variables.values()))

    def problem(self) -> cp.Problem:
        if self._problem is None:
            obj = self._objective if self._objective is not None else cp.Constant(0.0)
            goal = cp.Minimize(obj) if self._sense == "min" else cp.Maximize(obj)
            self._problem = cp.Problem(goal, [c.constraint for c in self._cons])
        return self._problem

    # -- verification ------------------------------------------------------
    def verify(self, eq_tol: float = 1e-7, ineq_tol: float = 1e-7,
               psd_tol: float = PSD_TOL) -> dict[str, Any]:
        """Re-evaluate every constraint at the current variable values."""
        worst_viol, worst_tag, min_eig, eig_tag = 0.0, "", np.inf, ""
        ok = True
        for c in self._cons:
            if c.kind == "psd":
                M = np.atleast_2d(c.exprs[0].value)
                ev = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
                if ev < min_eig:
                    min_eig, eig_tag = ev, c.tag
                if ev < -psd_tol:
                    ok = False
                continue
            if c.kind == "soc":
                t, x = c.exprs
                viol = float(np.linalg.norm(np.ravel(x.value)) - np.ravel(t.value).max())
                tol = ineq_tol * max(1.0, abs(float(np.ravel(t.value).max())))
            else:
                lhs = np.ravel(_val(c.exprs[0]))
                rhs = np.ravel(_val(c.exprs[1]))
                scale = max(1.0, float(np.max(np.abs(rhs), initial=0.0)))
                if c.kind == "eq":
                    viol = float(np.max(np.abs(lhs - rhs), initial=0.0))
                    tol = eq_tol * scale
                else:
                    viol = float(np.max(lhs - rhs, initial=-np.inf))
                    tol = ineq_tol * scale
            if viol > tol:
                ok = False
            if viol > worst_viol:
                worst_viol, worst_tag = viol, c.tag
        return {"ok": ok, "primal": worst_viol, "worst_tag": worst_tag,
                "min_psd_eig": float(min_eig), "min_psd_tag": eig_tag}


def _val(x):
    return x.value if isinstance(x, cp.Expression) else np.asarray(x, dtype=float)


_STATUS_MAP = {
    cp.OPTIMAL: Status.OPTIMAL,
    cp.OPTIMAL_INACCURATE: Status.OPTIMAL,
    cp.INFEASIBLE: Status.INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: Status.INFEASIBLE,
    cp.UNBOUNDED: Status.NUMERICAL_ERROR,
    cp.UNBOUNDED_INACCURATE: Status.NUMERICAL_ERROR,
    cp.USER_LIMIT: Status.MAX_ITER,
}


def _solver_kwargs(solver: str, eps_feas: float, eps_gap: float, max_iter: int) -> dict:
    if solver == "CLARABEL":
        return {"tol_feas": eps_feas, "tol_gap_abs": eps_gap, "tol_gap_rel": eps_gap,
                "tol_ktratio": 1e-6, "max_iter": max_iter}
    if solver == "SCS":
        return {"eps_abs": eps_feas, "eps_rel": eps_gap, "max_iters": max(max_iter, 20000)}
    if solver == "CVXOPT":
        return {"abstol": eps_gap, "reltol": eps_gap, "feastol": eps_feas, "max_iters": max_iter,
                "kktsolver": "robust"}  # tolerates the rank-deficient equality blocks of the MPC programs
    return {}


def _available(solvers: Iterable[str]) -> list[str]:
    inst = set(cp.installed_solvers())
    return [s for s in solvers if s in inst]


DEFAULT_SOLVERS = ("CLARABEL", "CVXOPT", "SCS")


SOLVE_DEFAULTS: dict[str, Any] = {"eps_feas": 1e-7, "eps_gap": 1e-7, "max_iter": 200}


def set_defaults(**kw: Any) -> None:
    """Override the process-wide defaults of :func:`solve` (``eps_feas``, ``eps_gap``, ``max_iter``)."""
    unknown = set(kw) - set(SOLVE_DEFAULTS)
    if unknown:
        raise KeyError(f"unknown solver option(s): {sorted(unknown)}")
    SOLVE_DEFAULTS.update(kw)


def solve(p: ConicProgram, eps_feas: float | None = None, eps_gap: float | None = None,
          max_iter: int | None = None, solvers: Iterable[str] = DEFAULT_SOLVERS, eq_tol: float = 1e-7,
          psd_tol: float = PSD_TOL) -> ConicSolution:
    """Solve ``p`` and re-verify the returned point.

    Solvers are tried in order (those not installed are skipped).  A later
    solver is consulted only when an earlier one raises, stops at its
    iteration limit, or returns a point that fails the independent
    re-verification (PSD eigenvalues ``>= -psd_tol``, equalities to
    ``eq_tol``, scalar inequalities to ``max(eps_feas, psd_tol)``).  CLARABEL
    gets one retry at 100x tighter tolerances first.  An infeasibility verdict is
    accepted from the first solver that gives one.  ``OPTIMAL`` is reported
    only for a re-verified point.
    """
    eps_feas = SOLVE_DEFAULTS["eps_feas"] if eps_feas is None else eps_feas
    eps_gap = SOLVE_DEFAULTS["eps_gap"] if eps_gap is None else eps_gap
    max_iter = SOLVE_DEFAULTS["max_iter"] if max_iter is None else max_iter
    prob = p.problem()
    t0 = time.perf_counter()
    best: ConicSolution | None = None
    msgs: list[str] = []
    attempts = []
    for name in _available(solvers):
        attempts.append((name, 1.0))
        if name == "CLARABEL":  # one tighter retry before handing over to a slower solver
            attempts.append((name, 1e-2))
    for name, tight in attempts:
        try:
            prob.solve(solver=name, **_solver_kwargs(name, eps_feas * tight, eps_gap * tight,
                                                     max_iter if tight == 1.0 else 2 * max_iter))
        except (cp.error.SolverError, ArithmeticError) as exc:  # ill-posed or solver crash: try the next one
            # CVXOPT can raise ZeroDivisionError from its scaling update on degenerate cones
            msgs.append(f"{name}: {type(exc).__name__}: {(str(exc).splitlines() or [''])[0]}")
            continue
        status = _STATUS_MAP.get(prob.status, Status.NUMERICAL_ERROR)
        stats = prob.solver_stats
        sol = ConicSolution(status=status, solver=name, solve_time=time.perf_counter() - t0,
                            iterations=int(getattr(stats, "num_iters", 0) or 0) if stats else 0,
                            message=str(prob.status))
        if status is Status.INFEASIBLE:
            return sol
        if prob.status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            # a dual-infeasibility certificate: another solver cannot do better (some report a bogus optimum)
            sol.message = f"{name}: problem is unbounded"
            return sol
        if status is Status.OPTIMAL:
            # a scalar inequality is a 1x1 PSD block: same tolerance as the PSD check
            chk = p.verify(eq_tol=eq_tol, ineq_tol=max(eq_tol, eps_feas, psd_tol), psd_tol=psd_tol)
            sol.residuals = chk
            sol.objective = float(prob.value)
            sol.values = {k: np.array(v.value) for k, v in p.variables.items()}
            if chk["ok"]:
                return sol
            sol.status = Status.NUMERICAL_ERROR
            sol.message = (f"{name} re-verification failed: primal {chk['primal']:.2e} at {chk['worst_tag']!r}, "
                           f"min eig {chk['min_psd_eig']:.2e} at {chk['min_psd_tag']!r}")
        msgs.append(sol.message)
        if best is None or (best.status is Status.NUMERICAL_ERROR and sol.status is Status.MAX_ITER):
            best = sol
    if best is None:
        best = ConicSolution(status=Status.NUMERICAL_ERROR)
    best.message = "; ".join(msgs) or "no solver available"
    best.solve_time = time.perf_counter() - t0
    return best
