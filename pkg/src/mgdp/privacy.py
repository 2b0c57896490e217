"""Laplace mechanism on the optimal pickup and the sensitivity heuristics.

Only the mechanism (:func:`dp_mechanism`) ever sees the private mode vector;
everything downstream of :func:`perturb_pickup` works on the noisy pickup.
"""
from __future__ import annotations

import json
import logging
import zlib
from itertools import product
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import (FlipBudgetExhausted, IndexOutOfRange, InfeasibleInitialMode, NonPositiveScale,
                     TooManyBits)
from .lr import as_mode, is_lr_feasible, mode_from_flat, mode_to_flat, solve_lr

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------
def stream(seed, name):
    """Independent generator for a named purpose under a run seed.

    Streams with different names never share draws, so enabling one consumer
    does not shift another's sequence.
    """
    key = zlib.crc32(name.encode())
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


def _open_uniform(rng, size=None):
    u = rng.random(size)
    if size is None:
        while u == 0.0:
            u = rng.random()
        return u
    zero = u == 0.0
    while zero.any():
        u[zero] = rng.random(int(zero.sum()))
        zero = u == 0.0
    return u


def laplace_sample(b, rng):
    """One Laplace(0, b) draw by inverse CDF."""
    if not b > 0:
        raise NonPositiveScale(f"Laplace scale must be positive, got {b}")
    return float(kernels.laplace_from_uniform(np.array([_open_uniform(rng)]), b)[0])


def laplace_noise(b, shape, rng):
    if not b > 0:
        raise NonPositiveScale(f"Laplace scale must be positive, got {b}")
    u = _open_uniform(rng, int(np.prod(shape)))
    return kernels.laplace_from_uniform(u, b).reshape(shape)


# ---------------------------------------------------------------------------
# mechanism
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PrivacyConfig:
    epsilon: float
    delta_lr: float
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.delta_lr >= 0:
            raise ValueError("sensitivity must be nonnegative")

    @property
    def scale(self):
        return self.delta_lr / self.epsilon


class MechanismOutput(NamedTuple):
    noisy: np.ndarray
    noise: np.ndarray
    scale: float


def perturb_pickup(pickup, cfg, rng=None):
    """Add i.i.d. Laplace(delta/epsilon) noise to a pickup matrix. No clipping."""
    rng = stream(cfg.seed, "mechanism") if rng is None else rng
    pickup = np.asarray(pickup, dtype=float)
    if cfg.scale == 0.0:
        logger.warning("zero sensitivity: the mechanism adds no noise and protects nothing")
        noise = np.zeros_like(pickup)
    else:
        noise = laplace_noise(cfg.scale, pickup.shape, rng)
    return MechanismOutput(pickup + noise, noise, cfg.scale)


def dp_mechanism(ctx, d, cfg, rng=None):
    """Noisy optimal pickup for the private mode vector ``d``."""
    r_star = solve_lr(ctx, d).pickup
    return perturb_pickup(r_star, cfg, rng)


# ---------------------------------------------------------------------------
# mode-vector helpers
# ---------------------------------------------------------------------------
def flip_bit(d, j):
    """Copy of ``d`` with flat (time-major) entry ``j`` toggled."""
    d = np.asarray(d)
    n_ess, T = d.shape
    if not 0 <= j < n_ess * T:
        raise IndexOutOfRange(f"flat index {j} outside [0, {n_ess * T})")
    out = d.copy()
    out[j % n_ess, j // n_ess] ^= 1
    return out


class _LrCache:
    """Memoised feasibility + optimal pickup per mode vector."""

    def __init__(self, ctx, tol=None):
        self.ctx = ctx
        self.tol = tol
        self._memo = {}
        self.solves = 0

    def __call__(self, d):
        key = np.asarray(d, dtype=np.int8).tobytes()
        if key not in self._memo:
            self.solves += 1
            res = is_lr_feasible(self.ctx, d, self.tol)
            self._memo[key] = (res.feasible, None if res.solution is None else res.solution.pickup)
        return self._memo[key]


class Projection(NamedTuple):
    mode: np.ndarray
    pickup: np.ndarray | None
    flips: int


def feasible_mode_projection(ctx, d, rng, max_flips=1000, oracle=None):
    """Random single-bit flips until the mode vector becomes feasible.

    ``oracle(mode) -> (feasible, pickup)`` defaults to solving the
    restoration problem; tests inject other predicates.
    """
    oracle = _LrCache(ctx) if oracle is None else oracle
    cur = np.asarray(d, dtype=np.int8).copy()
    n_bits = cur.size
    flips = 0
    ok, pickup = oracle(cur)
    while not ok:
        if flips >= max_flips:
            raise FlipBudgetExhausted(f"no feasible mode vector within {max_flips} flips")
        cur = flip_bit(cur, int(rng.integers(n_bits)))
        flips += 1
        ok, pickup = oracle(cur)
    return Projection(cur, pickup, flips)


def bit_sensitivity_scores(ctx, d, mode="flip", cache=None, workers=1):
    """Per-bit sensitivity of the optimal pickup, flat time-major order.

    ``mode="flip"``: ``||LR(flip_j(d)) - LR(d)||_2``, zero when the flipped
    vector is infeasible.  ``mode="dual"``: one solve; the bound multipliers
    of the charge/discharge limits scaled by those limits (a first-order
    proxy for the objective change, not for the pickup vector).
    """
    d = as_mode(d, ctx)
    cache = _LrCache(ctx) if cache is None else cache
    ok, base = cache(d)
    if not ok:
        raise InfeasibleInitialMode("scores need a feasible mode vector")
    n_bits = d.size
    if mode == "dual":
        sol = solve_lr(ctx, d)
        bd = sol.conic.bound_duals
        ix = sol.index
        pch = (ctx.ess.p_ch_max / ctx.base_mva)[:, None]
        pdis = (ctx.ess.p_dis_max / ctx.base_mva)[:, None]
        score = pch * np.abs(bd[ix.p_ch]) + pdis * np.abs(bd[ix.p_dis])
        return mode_to_flat(score).astype(float)
    if mode != "flip":
        raise ValueError(f"unknown scoring mode {mode!r}")

    def one(j):
        ok_j, r_j = cache(flip_bit(d, j))
        return float(np.linalg.norm((r_j - base).ravel())) if ok_j else 0.0

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return np.array(list(pool.map(one, range(n_bits))))
    return np.array([one(j) for j in range(n_bits)])


# ---------------------------------------------------------------------------
# greedy sensitivity estimate
# ---------------------------------------------------------------------------
@dataclass
class Iteration:
    k: int
    mode: list  # flat bits of d^(k)
    scores: list
    j_star: int
    candidate_feasible: bool
    projected: bool
    phi: float | None  # None when the step is not an adjacent feasible pair
    step_l1: float
    flips: int = 0


@dataclass
class SensitivityTrace:
    delta_estimate: float
    iterations: list = field(default_factory=list)
    termination: str = "IterationCap"
    witness: tuple | None = None  # (flat d, flat d') achieving the estimate
    lr_solves: int = 0

    @property
    def unique_iterates(self):
        return len({tuple(it.mode) for it in self.iterations})

    def to_dict(self):
        return {
            "delta_estimate": self.delta_estimate,
            "termination": self.termination,
            "witness": None if self.witness is None else [list(w) for w in self.witness],
            "lr_solves": self.lr_solves,
            "iterations": [vars(it) for it in self.iterations],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def estimate_sensitivity(ctx, d_init, tol=1e-6, max_iter=100, rng=None, *, scoring="flip",
                         max_flips=1000, workers=1, cache=None):
    """Greedy search for a large single-flip change of the optimal pickup.

    Each iteration scores every bit, flips the best one (lowest index on
    ties) and, if the result is feasible, records the l1 change as a
    sensitivity candidate.  Infeasible candidates are repaired with
    :func:`feasible_mode_projection` and contribute no candidate.  Stops when
    the step changes the pickup by less than ``tol`` in l1, when a mode
    vector recurs, or after ``max_iter`` iterations.  The estimate is a lower
    bound on the true sensitivity.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    cache = _LrCache(ctx) if cache is None else cache
    d = as_mode(d_init, ctx)
    ok, r_cur = cache(d)
    if not ok:
        raise InfeasibleInitialMode("initial mode vector is not feasible")

    trace = SensitivityTrace(delta_estimate=0.0)
    best = -np.inf
    visited = {d.tobytes()}
    for k in range(max_iter):
        scores = bit_sensitivity_scores(ctx, d, scoring, cache, workers)
        j_star = int(np.argmax(scores))
        cand = flip_bit(d, j_star)
        cand_ok, r_cand = cache(cand)
        phi, flips = None, 0
        if cand_ok:
            d_next, r_next = cand, r_cand
            phi = float(np.abs(r_next - r_cur).sum())
            if phi > best:
                best = phi
                trace.witness = (mode_to_flat(d).tolist(), mode_to_flat(d_next).tolist())
        else:
            proj = feasible_mode_projection(ctx, cand, rng, max_flips, cache)
            d_next, r_next, flips = proj.mode, proj.pickup, proj.flips
        step = float(np.abs(r_next - r_cur).sum())
        trace.iterations.append(Iteration(k, mode_to_flat(d).tolist(), scores.tolist(), j_star,
                                          bool(cand_ok), not cand_ok, phi, step, flips))
        if step < tol:
            trace.termination = "ToleranceMet"
            break
        if d_next.tobytes() in visited:
            trace.termination = "CycleDetected"
            break
        visited.add(d_next.tobytes())
        d, r_cur = d_next, r_next
    trace.delta_estimate = max(best, 0.0)
    trace.lr_solves = cache.solves
    return trace


def exact_sensitivity(ctx, max_bits=16):
    """Brute-force sensitivity over every adjacent pair of feasible mode vectors.

    Returns ``(delta, (flat d, flat d'))``.
    """
    n_bits = ctx.n_bits
    if n_bits > max_bits:
        raise TooManyBits(f"{n_bits} bits is too many to enumerate (cap {max_bits})")
    cache = _LrCache(ctx)
    best, pair = 0.0, None
    for bits in product((0, 1), repeat=n_bits):
        d = mode_from_flat(bits, ctx.ess.n)
        ok, r = cache(d)
        if not ok:
            continue
        for j in range(n_bits):
            if bits[j] == 1:
                continue  # each unordered pair once
            ok2, r2 = cache(flip_bit(d, j))
            if ok2:
                h = float(np.abs(r - r2).sum())
                if pair is None or h > best:
                    best, pair = h, (list(bits), mode_to_flat(flip_bit(d, j)).tolist())
    return best, pair
