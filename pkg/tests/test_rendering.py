import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilenerf.geometry import SegmentTable
from tilenerf.rendering import (SamplingPolicy, color_loss, cull, render, render_backward,
                                sample_segments)


def table(rows):
    """SegmentTable from per-ray lists of (tile, t_near, t_far)."""
    k = max(len(r) for r in rows)
    idx = np.full((len(rows), k), -1)
    tn = np.full((len(rows), k), np.inf)
    tf = np.full((len(rows), k), np.inf)
    for i, r in enumerate(rows):
        for j, (tile, a, b) in enumerate(r):
            idx[i, j], tn[i, j], tf[i, j] = tile, a, b
    return SegmentTable(idx, tn, tf)


FIXED = SamplingPolicy(fixed_per_segment=9)


class TestSampling:
    def test_endpoints_and_duplicate_boundary(self):
        b = sample_segments(table([[(0, 1.0, 3.0), (1, 3.0, 5.0)]]), FIXED, np.array([5.0]))
        assert len(b) == 18
        np.testing.assert_array_equal(b.t[[0, 8, 9, 17]], [1.0, 3.0, 3.0, 5.0])
        assert b.delta[8] == 0.0 and b.delta[9] > 0
        assert b.delta[17] == 0.0
        np.testing.assert_allclose(b.delta.sum(), 4.0)
        np.testing.assert_array_equal(b.tile_slot, [0] * 9 + [1] * 9)
        assert b.is_endpoint.sum() == 4

    def test_final_delta_reaches_floor(self):
        b = sample_segments(table([[(0, 0.0, 2.0)]]), FIXED, np.array([7.0]))
        assert b.delta[-1] == 5.0
        capped = sample_segments(table([[(0, 0.0, 2.0)]]),
                                 SamplingPolicy(fixed_per_segment=9, final_delta_cap=1.0),
                                 np.array([7.0]))
        assert capped.delta[-1] == 1.0

    def test_density_proportional_counts(self):
        pol = SamplingPolicy(samples_per_meter=4.0)
        b = sample_segments(table([[(0, 0.0, 2.0), (1, 2.0, 2.1)]]), pol, np.array([2.1]))
        counts = np.bincount(b.tile_slot)
        assert counts[0] == 9 and counts[1] == pol.min_per_segment

    def test_per_ray_cap(self):
        pol = SamplingPolicy(samples_per_meter=100.0, max_samples_per_ray=50)
        b = sample_segments(table([[(0, 0.0, 3.0), (1, 3.0, 5.0)]]), pol, np.array([5.0]))
        assert len(b) <= 50

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.05, 5.0), min_size=1, max_size=3), st.integers(0, 2 ** 32 - 1))
    def test_jittered_samples_stay_ordered(self, lengths, seed):
        edges = np.concatenate([[0.0], np.cumsum(lengths)])
        rows = [[(j, edges[j], edges[j + 1]) for j in range(len(lengths))]]
        b = sample_segments(table(rows), SamplingPolicy(), np.array([edges[-1]]),
                            np.random.default_rng(seed))
        assert np.all(np.diff(b.t) >= 0)
        assert np.all(b.delta >= 0)
        for j in range(len(lengths)):
            tj = b.t[b.tile_slot == j]
            assert tj[0] == edges[j] and tj[-1] == edges[j + 1]

    def test_cull_keeps_endpoints(self):
        b = sample_segments(table([[(0, 0.0, 2.0)]]), FIXED, np.array([2.0]))
        kept = cull(b, np.zeros(len(b), dtype=bool))
        np.testing.assert_array_equal(kept.t, [0.0, 2.0])


class TestRender:
    def test_constant_density_matches_beer_lambert(self):
        sigma0, L = 0.7, 4.0
        seg = table([[(0, 1.0, 1.0 + L)], [(0, 0.0, 1.5), (1, 1.5, L)]])
        b = sample_segments(seg, SamplingPolicy(fixed_per_segment=17), np.array([1 + L, L]))
        out, _ = render(np.full(len(b), sigma0), np.full((len(b), 3), 0.2), b, (1.0, 1.0, 1.0))
        np.testing.assert_allclose(out.opacity, 1 - math.exp(-sigma0 * L), rtol=1e-12)
        expect = 0.2 * (1 - math.exp(-sigma0 * L)) + math.exp(-sigma0 * L)
        np.testing.assert_allclose(out.rgb, expect, rtol=1e-6)

    def test_zero_density_shows_background(self):
        b = sample_segments(table([[(0, 0.0, 2.0)]]), FIXED, np.array([3.0]))
        out, _ = render(np.zeros(len(b)), np.ones((len(b), 3)), b, (0.1, 0.2, 0.3))
        np.testing.assert_allclose(out.rgb[0], [0.1, 0.2, 0.3])
        assert out.opacity[0] == 0.0

    def test_opaque_wall_depth(self):
        b = sample_segments(table([[(0, 0.0, 2.0), (1, 2.0, 4.0)]]), FIXED, np.array([4.0]))
        sigma = np.where(b.tile_slot == 1, 1e4, 0.0)
        out, _ = render(sigma, np.full((len(b), 3), 0.9), b)
        assert out.opacity[0] == pytest.approx(1.0)
        assert out.depth[0] == pytest.approx(2.0, abs=0.25)
        np.testing.assert_allclose(out.rgb[0], 0.9, atol=1e-6)

    def test_duplicate_endpoint_has_no_weight(self):
        b = sample_segments(table([[(0, 0.0, 2.0), (1, 2.0, 4.0)]]), FIXED, np.array([4.0]))
        _, cache = render(np.full(len(b), 3.0), np.zeros((len(b), 3)), b)
        assert cache.weights[8] == 0.0

    def test_non_finite_rejected(self):
        b = sample_segments(table([[(0, 0.0, 2.0)]]), FIXED, np.array([2.0]))
        sigma = np.ones(len(b))
        sigma[3] = np.nan
        with pytest.raises(FloatingPointError):
            render(sigma, np.zeros((len(b), 3)), b)

    def test_backward_matches_finite_differences(self, rng):
        seg = table([[(0, 0.0, 1.0), (1, 1.0, 2.5)], [(1, 0.3, 2.0)]])
        b = sample_segments(seg, SamplingPolicy(fixed_per_segment=5), np.array([3.0, 2.5]))
        sigma = rng.uniform(0.1, 2.0, len(b))
        color = rng.uniform(0, 1, (len(b), 3))
        target = rng.uniform(0, 1, (2, 3))

        def loss(s, c):
            out, _ = render(s, c, b)
            return color_loss(out.rgb, target)[0]

        out, cache = render(sigma, color, b)
        _, g = color_loss(out.rgb, target)
        ds, dc = render_backward(cache, color, g)
        h = 1e-6
        for i in range(len(b)):
            e = np.zeros(len(b))
            e[i] = h
            fd = (loss(sigma + e, color) - loss(sigma - e, color)) / (2 * h)
            assert ds[i] == pytest.approx(fd, rel=1e-5, abs=1e-10)
        for i in range(0, len(b), 3):
            for ch in range(3):
                e = np.zeros((len(b), 3))
                e[i, ch] = h
                fd = (loss(sigma, color + e) - loss(sigma, color - e)) / (2 * h)
                assert dc[i, ch] == pytest.approx(fd, rel=1e-5, abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 50.0), min_size=2, max_size=30))
    def test_weights_form_sub_probability(self, sig):
        n = len(sig)
        seg = table([[(0, 0.0, 3.0)]])
        b = sample_segments(seg, SamplingPolicy(fixed_per_segment=n), np.array([3.0]))
        _, cache = render(np.array(sig), np.zeros((n, 3)), b)
        assert np.all(cache.weights >= 0)
        assert cache.weights.sum() <= 1 + 1e-12


def test_color_loss():
    loss, grad = color_loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3)))
    assert loss == pytest.approx(1 / 3)
    np.testing.assert_allclose(grad, [[2 / 3, 0, 0]])
