import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from p2det.assigner import (
    NEGATIVE,
    SamplePoint,
    adaptive_threshold,
    assign,
    grid_samples,
    iou_stats,
    quality,
    shape_distance,
    shape_factor,
)
from p2det.geometry import OrientedBox

from oracles import brute_force_assign


def random_gts(g, n, lo=8.0, hi=72.0):
    out = []
    for _ in range(n):
        w = g.uniform(6.0, 40.0)
        out.append(OrientedBox(*g.uniform(lo, hi, 2), w, g.uniform(4.0, w), g.uniform(-math.pi, math.pi)))
    return out


def oracle(samples, gts, **kw):
    return brute_force_assign([(s.x, s.y, s.stride) for s in samples], [b.as_tuple() for b in gts], **kw)


class TestFormulas:
    @pytest.mark.parametrize(
        "ious,expected",
        [([0.4, 0.4, 0.4], (0.4, 0.0)), ([0.2, 0.4, 0.6], (0.4, 0.16330)), ([0.7], (0.7, 0.0))],
    )
    def test_iou_stats(self, ious, expected):
        mu, sigma = iou_stats(ious)
        assert mu == pytest.approx(expected[0], abs=1e-12)
        assert sigma == pytest.approx(expected[1], abs=1e-5)

    def test_iou_stats_empty(self):
        with pytest.raises(ValueError):
            iou_stats([])

    def test_shape_factor(self):
        assert shape_factor(1.0, 2.0) == pytest.approx(0.135335, abs=1e-6)
        assert shape_factor(1.0, 2.0) == pytest.approx(math.exp(-2), abs=1e-15)
        assert shape_factor(5.0, 1e-12) == pytest.approx(1.0, abs=1e-10)

    @given(st.floats(1, 20), st.floats(1, 20), st.floats(0.01, 5))
    def test_shape_factor_decreasing(self, a1, a2, w):
        if a1 < a2:
            assert shape_factor(a1, w) >= shape_factor(a2, w)

    def test_threshold(self):
        assert adaptive_threshold(0.5, 0.1, 1.0, 2.0) == pytest.approx(0.081201, abs=1e-6)
        assert adaptive_threshold(0.3, 0.0, 1.0, 0.0) == 0.3

    @given(st.floats(0, 1), st.floats(0, 0.5), st.floats(1, 10), st.floats(1, 10), st.floats(0.1, 4))
    def test_threshold_non_increasing_in_alpha(self, mu, sigma, a1, a2, w):
        lo, hi = sorted((a1, a2))
        assert adaptive_threshold(mu, sigma, hi, w) <= adaptive_threshold(mu, sigma, lo, w)

    def test_shape_distance(self):
        gt = OrientedBox(10, 10, 4, 2, 0.0)
        assert shape_distance(SamplePoint(10, 10, 8), gt) == 0.0
        assert shape_distance(SamplePoint(11, 10, 8), gt) == pytest.approx(0.5, abs=1e-15)

    def test_shape_distance_rotated_frame(self):
        gt = OrientedBox(0, 0, 4, 2, math.pi / 2)
        # offset along the long axis, which points along image y
        assert shape_distance(SamplePoint(0, 1, 8), gt) == pytest.approx(0.5, abs=1e-12)
        assert shape_distance(SamplePoint(0, 1, 8), gt, rotated_frame=False) == pytest.approx(math.sqrt(0.5), abs=1e-12)

    def test_shape_distance_squared_denominators(self):
        gt = OrientedBox(0, 0, 4, 2, 0.0)
        assert shape_distance(SamplePoint(4, 0, 8), gt, exponent=2) == pytest.approx(1.0, abs=1e-15)

    @given(st.floats(-math.pi, math.pi), st.floats(0.01, 5), st.floats(0.01, 5))
    def test_shape_distance_grows_along_rays(self, phi, r1, r2):
        gt = OrientedBox(0, 0, 6, 3, 0.4)
        d = lambda r: shape_distance(SamplePoint(r * math.cos(phi), r * math.sin(phi), 8), gt)
        lo, hi = sorted((r1, r2))
        assert d(lo) <= d(hi) + 1e-12

    def test_quality(self):
        assert quality(0.0) == 1.0
        assert quality(0.5) == pytest.approx(0.606531, abs=1e-6)
        assert quality(0.2) > quality(0.3)


class TestAssign:
    def test_no_gts_all_negative(self):
        res = assign(grid_samples(32, 8), [])
        assert res.num_positive == 0 and np.all(res.labels == NEGATIVE)

    def test_empty_samples(self):
        with pytest.raises(ValueError):
            assign([], [OrientedBox(0, 0, 4, 2)])

    def test_sample_at_center_gets_unit_quality(self):
        samples = grid_samples(32, 8)
        s = samples[5]
        res = assign(samples, [OrientedBox(s.x, s.y, 12, 6, 0.3)], fixed_threshold=0.0)
        assert res.labels[5] == 0 and res.quality[5] == 1.0

    def test_outside_samples_negative(self):
        samples = grid_samples(64, 8)
        gt = OrientedBox(30, 30, 14, 5, 0.6)
        res = assign(samples, [gt], fixed_threshold=0.0)
        for s, lab in zip(samples, res.labels):
            if not gt.contains(s.x, s.y):
                assert lab == NEGATIVE

    def test_quality_range_and_unit_iff_center(self, rng):
        samples = grid_samples(80, 8)
        for _ in range(30):
            gts = random_gts(rng, 3)
            res = assign(samples, gts)
            pos = res.positive
            assert np.all((res.quality[pos] > 0) & (res.quality[pos] <= 1))
            assert np.all(res.quality[~pos] == 0)
            for j in np.flatnonzero(pos):
                g = gts[res.labels[j]]
                at_center = math.hypot(samples[j].x - g.cx, samples[j].y - g.cy) < 1e-9
                assert (res.quality[j] == 1.0) == at_center

    def test_order_invariance(self, rng):
        samples = grid_samples(64, 8)
        for _ in range(20):
            gts = random_gts(rng, 3, 4.0, 60.0)
            perm = rng.permutation(len(samples))
            a = assign(samples, gts)
            b = assign([samples[i] for i in perm], gts)
            np.testing.assert_array_equal(b.labels, a.labels[perm])
            np.testing.assert_array_equal(b.quality, a.quality[perm])

    def test_positive_set_grows_with_shape_weight(self, rng):
        # the threshold depends on w * alpha, so raising w is raising alpha on a fixed pool
        samples = grid_samples(80, 8)
        for _ in range(30):
            gts = random_gts(rng, 2)
            prev = None
            for w in (0.0, 0.5, 1.0, 2.0, 4.0):
                pos = assign(samples, gts, w=w).positive
                if prev is not None:
                    assert np.all(pos[prev])
                prev = pos

    def test_two_gt_25_sample_oracle(self):
        samples = grid_samples(40, 8)
        gts = [OrientedBox(14, 15, 22, 7, 0.5), OrientedBox(24, 22, 16, 9, -0.9)]
        res = assign(samples, gts)
        labels, q = oracle(samples, gts)
        np.testing.assert_array_equal(res.labels, labels)
        np.testing.assert_allclose(res.quality, q, rtol=0, atol=1e-12)
        assert res.num_positive > 0

    @pytest.mark.parametrize("top_k", [1, 4, 9, 16])
    def test_oracle_random(self, rng, top_k):
        samples = grid_samples(80, 8)
        for _ in range(25):
            gts = random_gts(rng, int(rng.integers(1, 4)))
            res = assign(samples, gts, top_k=top_k, w=1.0)
            labels, q = oracle(samples, gts, top_k=top_k, w=1.0)
            np.testing.assert_array_equal(res.labels, labels)
            np.testing.assert_allclose(res.quality, q, rtol=0, atol=1e-12)

    def test_fixed_threshold_recorded(self):
        res = assign(grid_samples(32, 8), [OrientedBox(16, 16, 10, 4, 0.2)], fixed_threshold=0.5)
        assert res.thresholds[0] == 0.5
