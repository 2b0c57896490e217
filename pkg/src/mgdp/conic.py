"""Linear-objective conic programs: representation, solve, independent audit.

The engine is Clarabel (interior point, sparse).  Fixed variables
(``lo == hi``) are substituted out before the engine sees the program, so
they come back exactly at their fixed value.
"""
from __future__ import annotations

import enum
import io
import math
import os
import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import DimensionMismatch

DEFAULT_TOL = 1e-8


RETRY_TOL = 1e-6


def default_tol():
    env = os.environ.get("MGDP_SOLVER_TOL")
    return float(env) if env else DEFAULT_TOL


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"
    ITERATION_LIMIT = "IterationLimit"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class SocCone:
    """``||x[members]||_2 <= x[head]``."""

    head: int
    members: tuple[int, ...]


@dataclass(frozen=True)
class RotatedCone:
    """``||x[members]||_2**2 <= scale * x[u] * x[v]`` with ``x[u], x[v] >= 0``."""

    u: int
    v: int
    members: tuple[int, ...]
    scale: float = 2.0


def _csr(a, n):
    if a is None:
        return sp.csr_matrix((0, n))
    return sp.csr_matrix(a)


@dataclass(eq=False)
class ConicProgram:
    n_vars: int
    objective: np.ndarray
    sense: str = "min"
    A_eq: sp.csr_matrix | None = None
    b_eq: np.ndarray | None = None
    A_ineq: sp.csr_matrix | None = None  # rows a.x <= b
    b_ineq: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    soc_cones: list[SocCone] = field(default_factory=list)
    rotated_cones: list[RotatedCone] = field(default_factory=list)
    var_names: list[str] | None = None

    def __post_init__(self):
        n = self.n_vars
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.shape != (n,):
            raise DimensionMismatch(f"objective has shape {self.objective.shape}, n_vars={n}")
        if self.sense not in ("min", "max"):
            raise ValueError(f"sense must be 'min' or 'max', got {self.sense!r}")
        self.A_eq = _csr(self.A_eq, n)
        self.A_ineq = _csr(self.A_ineq, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float)
        self.b_ineq = np.zeros(0) if self.b_ineq is None else np.asarray(self.b_ineq, dtype=float)
        for name, A, b in (("eq", self.A_eq, self.b_eq), ("ineq", self.A_ineq, self.b_ineq)):
            if A.shape[1] != n or A.shape[0] != len(b):
                raise DimensionMismatch(f"{name} block is {A.shape} with {len(b)} right-hand sides")
        self.lo = np.full(n, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float)
        self.hi = np.full(n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float)
        if self.lo.shape != (n,) or self.hi.shape != (n,):
            raise DimensionMismatch("bound vectors must have n_vars entries")
        if np.any(self.lo > self.hi):
            k = int(np.argmax(self.lo > self.hi))
            raise ValueError(f"variable {k}: lower bound {self.lo[k]} exceeds upper {self.hi[k]}")
        for cone in self.soc_cones:
            self._check_indices((cone.head, *cone.members))
        for cone in self.rotated_cones:
            self._check_indices((cone.u, cone.v, *cone.members))

    def _check_indices(self, idx):
        if len(set(idx)) != len(idx):
            raise ValueError(f"cone indices {idx} are not distinct")
        if min(idx) < 0 or max(idx) >= self.n_vars:
            raise IndexError(f"cone indices {idx} out of range for {self.n_vars} variables")

    def dump(self, stream=None):
        """Write a sparse-triplet text listing (for cross-checking in other tools)."""
        out = stream or io.StringIO()
        out.write(f"n_vars {self.n_vars}\nsense {self.sense}\n")
        for k in np.flatnonzero(self.objective):
            out.write(f"obj {k} {self.objective[k]!r}\n")
        for tag, A, b in (("eq", self.A_eq, self.b_eq), ("le", self.A_ineq, self.b_ineq)):
            coo = A.tocoo()
            for i, j, v in zip(coo.row, coo.col, coo.data):
                out.write(f"{tag} {i} {j} {v!r}\n")
            for i, v in enumerate(b):
                out.write(f"{tag}_rhs {i} {v!r}\n")
        for k in range(self.n_vars):
            if np.isfinite(self.lo[k]) or np.isfinite(self.hi[k]):
                out.write(f"bound {k} {self.lo[k]!r} {self.hi[k]!r}\n")
        for c in self.soc_cones:
            out.write(f"soc {c.head} {' '.join(map(str, c.members))}\n")
        for c in self.rotated_cones:
            out.write(f"rsoc {c.u} {c.v} {c.scale!r} {' '.join(map(str, c.members))}\n")
        return out.getvalue() if stream is None else None


@dataclass(frozen=True)
class ResidualReport:
    max_eq_residual: float
    max_ineq_violation: float
    max_bound_violation: float
    max_cone_violation: float

    @property
    def worst(self):
        return max(self.max_eq_residual, self.max_ineq_violation,
                   self.max_bound_violation, self.max_cone_violation)


@dataclass(eq=False)
class ConicSolution:
    status: Status
    x: np.ndarray
    objective_value: float
    max_eq_residual: float = math.nan
    max_cone_violation: float = math.nan
    residuals: ResidualReport | None = None
    bound_duals: np.ndarray | None = None
    iterations: int = 0
    solve_time: float = 0.0
    tol_used: float = math.nan

    @property
    def optimal(self):
        return self.status is Status.OPTIMAL


def _cone_arrays(cones, rotated):
    if rotated:
        u = np.array([c.u for c in cones], dtype=np.int64)
        v = np.array([c.v for c in cones], dtype=np.int64)
        scale = np.array([c.scale for c in cones], dtype=float)
    else:
        u = np.array([c.head for c in cones], dtype=np.int64)
        v = scale = None
    lens = np.array([len(c.members) for c in cones], dtype=np.int64)
    ptr = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    idx = (np.concatenate([np.asarray(c.members, dtype=np.int64) for c in cones])
           if cones else np.zeros(0, dtype=np.int64))
    return u, v, scale, ptr, idx


def check_solution(p, x):
    """Residuals of ``x`` against every constraint of ``p`` by direct substitution."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n_vars,):
        raise DimensionMismatch(f"x has shape {x.shape}, program has {p.n_vars} variables")
    eq = np.abs(p.A_eq @ x - p.b_eq).max(initial=0.0)
    ineq = np.maximum(p.A_ineq @ x - p.b_ineq, 0.0).max(initial=0.0)
    bound = max(np.maximum(p.lo - x, 0.0).max(initial=0.0),
                np.maximum(x - p.hi, 0.0).max(initial=0.0))
    cone = 0.0
    if p.soc_cones:
        head, _, _, ptr, idx = _cone_arrays(p.soc_cones, False)
        cone = max(cone, kernels.soc_violation(x, head, ptr, idx).max())
    if p.rotated_cones:
        u, v, scale, ptr, idx = _cone_arrays(p.rotated_cones, True)
        cone = max(cone, kernels.rotated_violation(x, u, v, scale, ptr, idx).max())
    return ResidualReport(float(eq), float(ineq), float(bound), float(cone))


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------
def _cone_rows(p):
    """Rows of the conic blocks as (A_full, b_full, cone sizes) over all variables."""
    rows, cols, vals, sizes = [], [], [], []
    r0 = 0
    for c in p.soc_cones:
        members = (c.head, *c.members)
        for k, j in enumerate(members):
            rows.append(r0 + k)
            cols.append(j)
            vals.append(-1.0)
        r0 += len(members)
        sizes.append(len(members))
    for c in p.rotated_cones:
        a = math.sqrt(c.scale) / 2.0
        rows += [r0, r0, r0 + 1, r0 + 1]
        cols += [c.u, c.v, c.u, c.v]
        vals += [-a, -a, -a, a]
        for k, j in enumerate(c.members):
            rows.append(r0 + 2 + k)
            cols.append(j)
            vals.append(-1.0)
        r0 += 2 + len(c.members)
        sizes.append(2 + len(c.members))
    A = sp.csr_matrix((vals, (rows, cols)), shape=(r0, p.n_vars))
    return A, np.zeros(r0), sizes


_STATUS_MAP = {
    "Solved": Status.OPTIMAL,
    "PrimalInfeasible": Status.INFEASIBLE,
    "AlmostPrimalInfeasible": Status.INFEASIBLE,
    "DualInfeasible": Status.UNBOUNDED,
    "AlmostDualInfeasible": Status.UNBOUNDED,
    "MaxIterations": Status.ITERATION_LIMIT,
    "MaxTime": Status.ITERATION_LIMIT,
}


def solve_conic(p, tol=None, *, max_iter=200, time_limit=None, retry_tol=RETRY_TOL):
    """Solve ``p`` and audit the answer.

    ``tol`` is both the feasibility and the relative-gap tolerance handed to
    the engine (default ``1e-8`` or ``$MGDP_SOLVER_TOL``).  An ``AlmostSolved``
    engine verdict counts as optimal only if the independent audit stays
    within ``10 * tol``.  When the engine stalls short of ``tol`` the solve is
    repeated with the tolerance loosened tenfold at a time up to
    ``retry_tol``; ``tol_used`` records the tolerance that produced the answer.
    """
    tol = default_tol() if tol is None else tol
    t0 = time.perf_counter()
    n = p.n_vars
    q_full = p.objective if p.sense == "min" else -p.objective
    fixed = p.lo == p.hi
    free = ~fixed
    x_fixed = np.where(fixed, p.lo, 0.0)

    A_cone, b_cone, cone_sizes = _cone_rows(p)
    # non-bound rows over all variables; used for the engine and for bound duals
    A_nb = sp.vstack([p.A_eq, p.A_ineq, A_cone], format="csr")
    b_nb = np.concatenate([p.b_eq, p.b_ineq, b_cone]) - A_nb @ x_fixed
    n_eq, n_in = p.A_eq.shape[0], p.A_ineq.shape[0]

    free_idx = np.flatnonzero(free)
    col = np.full(n, -1)
    col[free_idx] = np.arange(len(free_idx))
    up = free_idx[np.isfinite(p.hi[free_idx])]
    dn = free_idx[np.isfinite(p.lo[free_idx])]
    m_b = len(up) + len(dn)
    A_bound = sp.csr_matrix(
        (np.concatenate([np.ones(len(up)), -np.ones(len(dn))]),
         (np.arange(m_b), np.concatenate([col[up], col[dn]]))),
        shape=(m_b, len(free_idx)))
    b_bound = np.concatenate([p.hi[up], -p.lo[dn]])

    A_free = A_nb[:, free_idx]
    # engine row order: zero cone, nonnegatives (ineq rows + bounds), SOCs
    A = sp.vstack([A_free[:n_eq], A_free[n_eq:n_eq + n_in], A_bound,
                   A_free[n_eq + n_in:]], format="csc")
    b = np.concatenate([b_nb[:n_eq], b_nb[n_eq:n_eq + n_in], b_bound, b_nb[n_eq + n_in:]])

    if len(free_idx) == 0:
        x = x_fixed.copy()
        res = check_solution(p, x)
        status = Status.OPTIMAL if res.worst <= tol else Status.INFEASIBLE
        return _finish(p, status, x, res, None, 0, time.perf_counter() - t0, tol)

    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_in + m_b:
        cones.append(clarabel.NonnegativeConeT(n_in + m_b))
    cones += [clarabel.SecondOrderConeT(k) for k in cone_sizes]

    P = sp.csc_matrix((len(free_idx), len(free_idx)))
    ladder = [tol]
    while ladder[-1] * 10 <= max(retry_tol, tol) * (1 + 1e-9):
        ladder.append(ladder[-1] * 10)
    iters = 0
    for cur in ladder:
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_feas = cur
        settings.tol_gap_abs = cur
        settings.tol_gap_rel = cur
        settings.max_iter = max_iter
        if time_limit is not None:
            settings.time_limit = float(time_limit)
        solver = clarabel.DefaultSolver(P, q_full[free_idx], A, b, cones, settings)
        sol = solver.solve()
        iters += sol.iterations

        x = x_fixed.copy()
        x[free_idx] = np.asarray(sol.x)
        res = check_solution(p, x)
        name = str(sol.status).split(".")[-1]
        if name == "Solved":
            # the engine's criteria are scaled; a gross audit failure still means trouble
            status = Status.OPTIMAL if res.worst <= max(1e3 * cur, 1e-6) else Status.NUMERICAL_FAILURE
        elif name == "AlmostSolved":
            status = Status.OPTIMAL if res.worst <= 10 * cur else Status.NUMERICAL_FAILURE
        else:
            status = _STATUS_MAP.get(name, Status.NUMERICAL_FAILURE)
        # certificates and hard limits are not tolerance problems
        if status is not Status.NUMERICAL_FAILURE:
            break

    duals = None
    if status is Status.OPTIMAL:
        z = np.asarray(sol.z)
        z_nb = np.concatenate([z[:n_eq + n_in], z[n_eq + n_in + m_b:]])
        duals = -(q_full + A_nb.T @ z_nb)
    return _finish(p, status, x, res, duals, iters, time.perf_counter() - t0, cur)


def _finish(p, status, x, res, duals, iters, elapsed, tol_used=math.nan):
    return ConicSolution(
        status=status,
        x=x,
        objective_value=float(p.objective @ x),
        max_eq_residual=res.max_eq_residual,
        max_cone_violation=res.max_cone_violation,
        residuals=res,
        bound_duals=duals,
        iterations=int(iters),
        solve_time=elapsed,
        tol_used=tol_used,
    )
