"""Feasibility restoration of a noisy pickup by branch-and-bound over mode vectors.

The search only ever sees the noisy pickup; no function here accepts the
private mode vector.
"""
from __future__ import annotations

import heapq
import json
import logging
import time
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .conic import Status, solve_conic
from .errors import DimensionMismatch, FlipBudgetExhausted, RootInfeasible, TooManyBits
from .lr import _assemble, _extract, mode_from_flat, mode_to_flat
from .privacy import feasible_mode_projection, stream

logger = logging.getLogger(__name__)

INTEGRAL_TOL = 1e-6


@dataclass(frozen=True)
class FrLimits:
    gap: float = 1e-4
    node_limit: int = 100_000
    time_limit: float | None = None
    abs_tol: float = 1e-9  # absolute slack on pruning, covers zero objectives


@dataclass
class BnbNode:
    fixed_bits: dict
    lower_bound: float
    depth: int
    relaxed: np.ndarray | None = None  # flat relaxed d at this node

    def __lt__(self, other):
        return False  # heap ties fall back to the insertion counter


@dataclass(eq=False)
class FrResult:
    d_hat: np.ndarray | None
    rho: np.ndarray | None
    r_hat: np.ndarray | None
    objective: float
    nodes_explored: int
    gap: float
    status: str  # Optimal, GapLimit, NodeLimit, Infeasible
    solution: object = None  # LrSolution at (d_hat, r_hat)
    solves: int = 0
    elapsed: float = 0.0

    @property
    def d_hat_flat(self):
        return None if self.d_hat is None else mode_to_flat(self.d_hat).tolist()

    def to_dict(self):
        return {
            "status": self.status,
            "objective": self.objective,
            "gap": self.gap,
            "nodes_explored": self.nodes_explored,
            "d_hat": self.d_hat_flat,
            "rho": None if self.rho is None else self.rho.tolist(),
            "r_hat": None if self.r_hat is None else self.r_hat.tolist(),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _check_shape(ctx, r_tilde):
    r_tilde = np.asarray(r_tilde, dtype=float)
    if r_tilde.shape != ctx.shape:
        raise DimensionMismatch(f"noisy pickup has shape {r_tilde.shape}, expected {ctx.shape}")
    if not np.isfinite(r_tilde).all():
        raise ValueError("noisy pickup contains non-finite entries")
    return r_tilde


def build_fr_relaxation(ctx, r_tilde, fixed_bits=None):
    """Relaxation of the restoration MISOCP with ``fixed_bits`` (flat index -> bit) pinned.

    Returns ``(program, index)``; free mode entries are boxed in [0, 1].
    """
    r_tilde = _check_shape(ctx, r_tilde)
    fixed_bits = dict(fixed_bits or {})
    for j in fixed_bits:
        if not 0 <= j < ctx.n_bits:
            raise DimensionMismatch(f"fixed bit index {j} outside [0, {ctx.n_bits})")
    return _assemble(ctx, fixed_bits=fixed_bits, offset=r_tilde)


class _FixedModeSolver:
    """Memoised fixed-mode restoration solves; callable as a feasibility oracle."""

    def __init__(self, ctx, r_tilde, tol):
        self.ctx, self.r_tilde, self.tol = ctx, r_tilde, tol
        self.memo = {}
        self.solves = 0

    def solve(self, d):
        d = np.asarray(d, dtype=np.int8)
        key = d.tobytes()
        if key not in self.memo:
            self.solves += 1
            bits = dict(enumerate(int(b) for b in mode_to_flat(d)))
            prog, ix = build_fr_relaxation(self.ctx, self.r_tilde, bits)
            sol = solve_conic(prog, self.tol)
            self.memo[key] = (sol, ix)
        return self.memo[key]

    def __call__(self, d):
        sol, _ = self.solve(d)
        return sol.optimal, None


def _rounded_modes(ctx, sol, ix, fixed_bits):
    """Candidate integral modes from a relaxed node: 0.5 rounding and flow-guided rounding."""
    half = mode_from_flat((_relaxed_flat(ctx, sol, ix, fixed_bits) >= 0.5).astype(int), ctx.ess.n)
    flow = (sol.x[ix.p_ch] * ctx.ess.gamma_ch[:, None]
            > sol.x[ix.p_dis] * ctx.ess.gamma_dis[:, None]).astype(np.int8)
    for j, bit in fixed_bits.items():
        flow[j % ctx.ess.n, j // ctx.ess.n] = bit
    half = half.astype(np.int8)
    return [half] if np.array_equal(half, flow) else [half, flow]


def _relaxed_flat(ctx, sol, ix, fixed_bits):
    d = np.empty(ctx.n_bits)
    NE = ctx.ess.n
    for j in range(ctx.n_bits):
        k = ix.d[j % NE, j // NE]
        d[j] = fixed_bits[j] if k < 0 else sol.x[k]
    return d


def _polish(ctx, pickup):
    """Clip into the box and enforce monotonicity exactly (moves of solver-tolerance size)."""
    r = np.clip(pickup, 0.0, ctx.forecast.pickup_cap)
    r = np.maximum.accumulate(r, axis=1)
    return np.minimum(r, ctx.forecast.pickup_cap)


def _result(ctx, r_tilde, d_hat, sol, ix, status, nodes, gap, solves, t0):
    r_hat = _polish(ctx, r_tilde + sol.x[ix.z])
    rho = r_hat - r_tilde
    detail = _extract(ctx, ix, sol, r_hat)
    return FrResult(d_hat=d_hat, rho=rho, r_hat=r_hat, objective=float(np.linalg.norm(rho)),
                    nodes_explored=nodes, gap=gap, status=status, solution=detail, solves=solves,
                    elapsed=time.perf_counter() - t0)


def solve_fr(ctx, r_tilde, limits=None, *, tol=None, rng=None, seed=0, trace=None,
             max_flips=1000):
    """Minimum-norm feasibility restoration of ``r_tilde`` by best-first branch-and-bound.

    ``trace`` may be a path or a writable file; one JSON line is written per
    evaluated node.
    """
    limits = FrLimits() if limits is None else limits
    r_tilde = _check_shape(ctx, r_tilde)
    rng = stream(seed, "fr-repair") if rng is None else rng
    t0 = time.perf_counter()
    fixed_solver = _FixedModeSolver(ctx, r_tilde, tol)

    own = isinstance(trace, (str, bytes)) or hasattr(trace, "__fspath__")
    log = open(trace, "w") if own else trace
    counter = 0
    nodes = 0

    def evaluate(fixed_bits, depth):
        nonlocal nodes
        prog, ix = build_fr_relaxation(ctx, r_tilde, fixed_bits)
        sol = solve_conic(prog, tol)
        nodes += 1
        if log is not None:
            log.write(json.dumps({"node": nodes, "depth": depth, "fixed": len(fixed_bits),
                                  "status": str(sol.status.value),
                                  "bound": sol.objective_value if sol.optimal else None}) + "\n")
        return sol, ix

    try:
        root_sol, root_ix = evaluate({}, 0)
        if root_sol.status is Status.INFEASIBLE:
            raise RootInfeasible("the fully relaxed restoration problem is infeasible")
        if not root_sol.optimal:
            raise RootInfeasible(f"root relaxation ended with status {root_sol.status.value}")

        inc_val, inc_d = np.inf, None

        def offer(d):
            nonlocal inc_val, inc_d
            sol, _ = fixed_solver.solve(d)
            if sol.optimal and sol.objective_value < inc_val:
                inc_val, inc_d = sol.objective_value, np.asarray(d, dtype=np.int8)

        for cand in _rounded_modes(ctx, root_sol, root_ix, {}):
            if fixed_solver(cand)[0]:
                offer(cand)
        if inc_d is None:
            try:
                proj = feasible_mode_projection(ctx, _rounded_modes(ctx, root_sol, root_ix, {})[0],
                                                rng, max_flips, fixed_solver)
                offer(proj.mode)
            except FlipBudgetExhausted:
                logger.warning("incumbent repair failed; searching without an incumbent")

        def prunable(bound):
            return bound >= inc_val - max(limits.gap * abs(inc_val), limits.abs_tol)

        heap = []
        root = BnbNode({}, root_sol.objective_value, 0, _relaxed_flat(ctx, root_sol, root_ix, {}))
        heapq.heappush(heap, (root.lower_bound, counter, root))
        hit = None
        while heap:
            bound, _, node = heapq.heappop(heap)
            if prunable(bound):
                continue
            frac = np.abs(node.relaxed - np.round(node.relaxed))
            free = [j for j in range(ctx.n_bits) if j not in node.fixed_bits]
            if not free or frac[free].max() <= INTEGRAL_TOL:
                offer(mode_from_flat(np.round(node.relaxed).astype(int), ctx.ess.n))
                continue
            # most fractional: closest to 0.5, lowest index first
            j_star = min(free, key=lambda j: (abs(node.relaxed[j] - 0.5), j))
            for bit in (0, 1):
                if nodes >= limits.node_limit:
                    hit = "nodes"
                    break
                if limits.time_limit is not None and time.perf_counter() - t0 > limits.time_limit:
                    hit = "time"
                    break
                fixed = dict(node.fixed_bits)
                fixed[j_star] = bit
                sol, ix = evaluate(fixed, node.depth + 1)
                if not sol.optimal:
                    continue
                child = BnbNode(fixed, max(sol.objective_value, node.lower_bound), node.depth + 1,
                                _relaxed_flat(ctx, sol, ix, fixed))
                for cand in _rounded_modes(ctx, sol, ix, fixed):
                    offer(cand)
                if not prunable(child.lower_bound):
                    counter += 1
                    heapq.heappush(heap, (child.lower_bound, counter, child))
            if hit:
                heapq.heappush(heap, (bound, -1, node))
                break
    finally:
        if own:
            log.close()

    solves = nodes + fixed_solver.solves
    if inc_d is None:
        return FrResult(None, None, None, float("inf"), nodes, float("inf"), "Infeasible",
                        solves=solves, elapsed=time.perf_counter() - t0)
    open_bounds = [b for b, _, _ in heap if not prunable(b)]
    lower = min(open_bounds) if open_bounds else inc_val
    gap = max(inc_val - lower, 0.0) / max(abs(inc_val), 1e-12) if inc_val > limits.abs_tol else 0.0
    if not open_bounds:
        status = "Optimal"
    else:
        status = "NodeLimit" if hit == "nodes" else "GapLimit"
    sol, ix = fixed_solver.solve(inc_d)
    return _result(ctx, r_tilde, inc_d, sol, ix, status, nodes, gap, solves, t0)


def enumerate_fr_oracle(ctx, r_tilde, max_bits=16, tol=None):
    """Global optimum of the restoration MISOCP by solving every fixed mode vector."""
    r_tilde = _check_shape(ctx, r_tilde)
    if ctx.n_bits > max_bits:
        raise TooManyBits(f"{ctx.n_bits} bits exceeds the enumeration cap of {max_bits}")
    t0 = time.perf_counter()
    solver = _FixedModeSolver(ctx, r_tilde, tol)
    best_val, best_d = np.inf, None
    for bits in product((0, 1), repeat=ctx.n_bits):
        d = mode_from_flat(bits, ctx.ess.n).astype(np.int8)
        sol, _ = solver.solve(d)
        if sol.optimal and sol.objective_value < best_val:
            best_val, best_d = sol.objective_value, d
    if best_d is None:
        return FrResult(None, None, None, float("inf"), solver.solves, float("inf"), "Infeasible",
                        solves=solver.solves, elapsed=time.perf_counter() - t0)
    sol, ix = solver.solve(best_d)
    return _result(ctx, r_tilde, best_d, sol, ix, "Optimal", solver.solves, 0.0, solver.solves, t0)
