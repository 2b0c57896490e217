import inspect

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from mgdp import kernels
from mgdp.errors import FlipBudgetExhausted, IndexOutOfRange, InfeasibleInitialMode, NonPositiveScale
from mgdp.lr import EssFleet, LoadForecast, LrContext, mode_from_flat, mode_to_flat, solve_lr
from mgdp.netmodel import to_per_unit
from mgdp.privacy import (PrivacyConfig, _LrCache, bit_sensitivity_scores, dp_mechanism,
                          estimate_sensitivity, exact_sensitivity, feasible_mode_projection,
                          flip_bit, laplace_noise, laplace_sample, perturb_pickup, stream)
from mgdp.toy import tiny_case, tiny_context, zero_demand_context


class FixedU:
    """Generator stand-in returning preset uniforms."""

    def __init__(self, u):
        self.u = u

    def random(self, size=None):
        return self.u if size is None else np.full(size, self.u)


def test_median_maps_to_zero():
    assert laplace_sample(1.0, FixedU(0.5)) == 0.0


def test_inverse_cdf_by_hand():
    assert laplace_sample(1.0, FixedU(0.9)) == pytest.approx(-np.log(0.2))
    assert laplace_sample(2.0, FixedU(0.1)) == pytest.approx(2 * np.log(0.2))


def test_nonpositive_scale():
    rng = np.random.default_rng(0)
    for b in (0.0, -1.0):
        with pytest.raises(NonPositiveScale):
            laplace_sample(b, rng)
        with pytest.raises(NonPositiveScale):
            laplace_noise(b, (2, 2), rng)


def test_moments_and_cdf():
    x = laplace_noise(1.0, (1_000_000,), stream(1, "moments"))
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 2.0) < 0.04
    # empirical CDF against the closed form at a few points
    for q in (-2.0, -0.5, 0.0, 0.7, 3.0):
        cdf = 0.5 * np.exp(q) if q < 0 else 1 - 0.5 * np.exp(-q)
        assert abs((x <= q).mean() - cdf) < 3e-3
    assert stats.kstest(x[:20_000], stats.laplace(scale=1.0).cdf).pvalue > 1e-3


@given(st.floats(1e-3, 50.0), st.floats(1e-6, 1 - 1e-6))
def test_inverse_cdf_property(b, u):
    x = kernels.laplace_from_uniform(np.array([u]), b)[0]
    # F(x) = u for the Laplace(0, b) law
    F = 0.5 * np.exp(x / b) if x < 0 else 1 - 0.5 * np.exp(-x / b)
    assert F == pytest.approx(u, abs=1e-9)


def test_streams_are_independent_and_repeatable():
    a = stream(7, "mechanism").random(5)
    assert np.array_equal(a, stream(7, "mechanism").random(5))
    assert not np.array_equal(a, stream(7, "projection").random(5))
    assert not np.array_equal(a, stream(8, "mechanism").random(5))


def test_scale_arithmetic():
    assert PrivacyConfig(0.2, 1.2863).scale == pytest.approx(6.4315)


def test_zero_sensitivity_adds_nothing():
    r = np.random.default_rng(0).random((3, 2))
    out = perturb_pickup(r, PrivacyConfig(0.5, 0.0))
    assert np.array_equal(out.noisy, r)


def test_mechanism_deterministic_given_seed():
    ctx = tiny_context()
    d = np.zeros((2, 2), int)
    a = dp_mechanism(ctx, d, PrivacyConfig(0.8, 1.0, seed=3))
    b = dp_mechanism(ctx, d, PrivacyConfig(0.8, 1.0, seed=3))
    assert np.array_equal(a.noisy, b.noisy)
    np.testing.assert_allclose(a.noisy - a.noise, solve_lr(ctx, d).pickup)


def test_no_clipping():
    out = perturb_pickup(np.full((4, 3), 0.5), PrivacyConfig(0.05, 1.0, seed=1))
    assert out.noisy.max() > 1 or out.noisy.min() < 0


def test_flip_bit():
    d = np.zeros((2, 3), int)
    e = flip_bit(d, 3)
    assert mode_to_flat(e).tolist() == [0, 0, 0, 1, 0, 0]
    assert np.array_equal(flip_bit(e, 3), d)
    with pytest.raises(IndexOutOfRange):
        flip_bit(d, 6)
    with pytest.raises(IndexOutOfRange):
        flip_bit(d, -1)


@given(st.lists(st.integers(0, 1), min_size=6, max_size=6), st.integers(0, 5))
def test_flip_is_involution(bits, j):
    d = mode_from_flat(bits, 2)
    once = flip_bit(d, j)
    assert int((once != d).sum()) == 1
    assert np.array_equal(flip_bit(once, j), d)


def test_projection_keeps_feasible_input():
    ctx = tiny_context()
    d = np.zeros((2, 2), np.int8)
    proj = feasible_mode_projection(ctx, d, np.random.default_rng(0))
    assert proj.flips == 0 and np.array_equal(proj.mode, d)


def parity_oracle(d):
    return int(np.asarray(d).sum()) % 2 == 0, None


def test_projection_with_injected_predicate():
    d = mode_from_flat([1, 0, 0, 0, 0, 0], 2)
    proj = feasible_mode_projection(None, d, np.random.default_rng(5), oracle=parity_oracle)
    assert proj.mode.sum() % 2 == 0 and proj.flips >= 1
    again = feasible_mode_projection(None, d, np.random.default_rng(5), oracle=parity_oracle)
    assert np.array_equal(proj.mode, again.mode) and proj.flips == again.flips


def test_projection_budget():
    d = mode_from_flat([1, 0, 0, 0], 2)
    with pytest.raises(FlipBudgetExhausted):
        feasible_mode_projection(None, d, np.random.default_rng(0), max_flips=3,
                                 oracle=lambda m: (False, None))


def test_scores_match_recomputation():
    ctx = tiny_context()
    d = mode_from_flat([0, 1, 0, 0], 2)
    scores = bit_sensitivity_scores(ctx, d)
    base = solve_lr(ctx, d).pickup
    for j in range(4):
        ref = np.linalg.norm((solve_lr(ctx, flip_bit(d, j)).pickup - base).ravel())
        assert scores[j] == pytest.approx(ref, abs=1e-6)


def test_scores_zero_for_constant_query():
    ctx = zero_demand_context()
    np.testing.assert_allclose(bit_sensitivity_scores(ctx, np.zeros((2, 2), int)), 0.0, atol=1e-6)


def redundant_context():
    """Each unit alone can carry the whole feeder for the whole horizon."""
    net = to_per_unit(tiny_case(), [1, 3], root=1)
    ess = EssFleet.identical([1, 3], s_min=0.1, s_max=20.0, p_ch_max=5.0, p_dis_max=5.0,
                             gamma_ch=0.9, gamma_dis=1.11, s_init=15.0)
    return LrContext(net, ess, LoadForecast.constant(net, 2))


def test_redundant_storage_scores_zero():
    ctx = redundant_context()
    scores = bit_sensitivity_scores(ctx, np.zeros((2, 2), int))
    np.testing.assert_allclose(scores, 0.0, atol=1e-5)


def test_dual_scores_shape():
    ctx = tiny_context()
    s = bit_sensitivity_scores(ctx, np.zeros((2, 2), int), mode="dual")
    assert s.shape == (4,) and np.all(s >= 0)
    with pytest.raises(ValueError):
        bit_sensitivity_scores(ctx, np.zeros((2, 2), int), mode="nope")


def test_parallel_scores_identical():
    ctx = tiny_context()
    d = mode_from_flat([0, 1, 0, 0], 2)
    assert np.array_equal(bit_sensitivity_scores(ctx, d), bit_sensitivity_scores(ctx, d, workers=3))


def test_zero_demand_sensitivity():
    tr = estimate_sensitivity(zero_demand_context(), np.zeros((2, 2), int))
    assert tr.delta_estimate < 1e-6
    assert tr.termination == "ToleranceMet" and len(tr.iterations) == 1


def test_tiny_estimate_below_exact_with_witness():
    ctx = tiny_context()
    exact, pair = exact_sensitivity(ctx)
    assert exact > 0 and pair is not None
    for bits in ([0, 0, 0, 0], [1, 0, 0, 1], [0, 1, 1, 0], [1, 1, 1, 1]):
        tr = estimate_sensitivity(ctx, mode_from_flat(bits, 2), rng=np.random.default_rng(0))
        assert tr.delta_estimate <= exact + 1e-6
        assert tr.termination in ("ToleranceMet", "CycleDetected", "IterationCap")
        if tr.delta_estimate > 0:
            a, b = (mode_from_flat(w, 2) for w in tr.witness)
            assert int((a != b).sum()) == 1
            h = np.abs(solve_lr(ctx, a).pickup - solve_lr(ctx, b).pickup).sum()
            assert h == pytest.approx(tr.delta_estimate, abs=1e-6)


def test_infeasible_start_rejected():
    ctx = tiny_context()
    bad = LrContext(ctx.network, ctx.ess.with_s_init([1.5, 0.7]), ctx.forecast)
    with pytest.raises(InfeasibleInitialMode):
        estimate_sensitivity(bad, np.zeros((2, 2), int))


def test_cache_counts_unique_solves():
    ctx = tiny_context()
    cache = _LrCache(ctx)
    d = np.zeros((2, 2), np.int8)
    cache(d)
    cache(d.copy())
    assert cache.solves == 1


def test_trace_json_round_trip():
    import json

    tr = estimate_sensitivity(tiny_context(), np.zeros((2, 2), int))
    doc = json.loads(tr.to_json())
    assert doc["termination"] == tr.termination and len(doc["iterations"]) == len(tr.iterations)


def test_exact_sensitivity_guard():
    from mgdp.errors import TooManyBits
    from mgdp.toy import case33_context

    with pytest.raises(TooManyBits):
        exact_sensitivity(case33_context(np.full(7, 3.0)))


def test_perturb_pickup_takes_no_mode():
    # only the mechanism itself sees d
    assert "d" not in inspect.signature(perturb_pickup).parameters
