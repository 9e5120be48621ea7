import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from p2det.geometry import (
    DegenerateGeometryError,
    OrientedBox,
    aspect_ratio,
    canonical_quad,
    convex_hull,
    corners_to_obb,
    giou,
    obb_iou,
    obb_to_corners,
    point_in_convex_polygon,
    polygon_area,
    polygon_intersection_area,
    rotate_box,
)

from oracles import mc_iou

coord = st.floats(-50, 50, allow_nan=False)
edge = st.floats(0.5, 30, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)


@st.composite
def boxes(draw):
    return OrientedBox(draw(coord), draw(coord), draw(edge), draw(edge), draw(angle))


def angle_gap(a, b, period=math.pi):
    d = (a - b) % period
    return min(d, period - d)


def random_box(g, spread=10.0):
    return OrientedBox(*g.uniform(-spread, spread, 2), *g.uniform(1.0, 12.0, 2), g.uniform(-math.pi, math.pi))


class TestOrientedBox:
    def test_long_edge_swap(self):
        b = OrientedBox(0, 0, 1, 3, 0.2)
        assert (b.w, b.h) == (3, 1)
        assert b.theta == pytest.approx(0.2 + math.pi / 2 - math.pi)

    @given(boxes())
    def test_canonical_ranges(self, b):
        assert b.w >= b.h > 1e-6
        assert -math.pi / 2 <= b.theta < math.pi / 2

    @pytest.mark.parametrize("w,h", [(0.0, 1.0), (1.0, 1e-9), (math.nan, 1.0)])
    def test_degenerate_rejected(self, w, h):
        with pytest.raises(DegenerateGeometryError):
            OrientedBox(0, 0, w, h)


class TestConversions:
    def test_corners_of_simple_box(self):
        c = obb_to_corners(OrientedBox(0, 0, 2, 1, 0))
        np.testing.assert_allclose(c, [[-1, -0.5], [1, -0.5], [1, 0.5], [-1, 0.5]], atol=1e-15)

    def test_unit_square(self):
        b = corners_to_obb([(0, 0), (1, 0), (1, 1), (0, 1)])
        np.testing.assert_allclose([b.cx, b.cy, b.w, b.h], [0.5, 0.5, 1, 1], atol=1e-12)
        assert angle_gap(b.theta, 0.0, math.pi / 2) < 1e-12

    @given(boxes())
    def test_round_trip(self, b):
        assume(b.w - b.h > 1e-6)
        r = corners_to_obb(obb_to_corners(b))
        np.testing.assert_allclose([r.cx, r.cy, r.w, r.h], [b.cx, b.cy, b.w, b.h], atol=1e-9)
        assert angle_gap(r.theta, b.theta) < 1e-9

    def test_min_area_rectangle_of_general_quad(self):
        # a kite: its min-area rectangle has an edge flush with a hull edge
        pts = [(0, 0), (4, 1), (5, 5), (1, 3)]
        b = corners_to_obb(pts)
        for x, y in pts:
            assert b.contains(x, y, tol=1e-9)
        best = min(
            (np.ptp(np.array(pts) @ [math.cos(t), math.sin(t)]) * np.ptp(np.array(pts) @ [-math.sin(t), math.cos(t)]))
            for t in np.linspace(0, math.pi, 20001)
        )
        assert b.area <= best + 1e-6

    @pytest.mark.parametrize("order", [[0, 1, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]])
    def test_canonical_quad_any_winding(self, order):
        c = obb_to_corners(OrientedBox(3, 4, 6, 2, 0.7))
        q = canonical_quad(c[order])
        assert polygon_area([tuple(p) for p in q]) > 0
        assert sorted(map(tuple, np.round(q, 9))) == sorted(map(tuple, np.round(c, 9)))


class TestConvexHull:
    def test_square(self):
        sq = [(0, 0), (1, 0), (1, 1), (0, 1)]
        assert sorted(convex_hull(sq)) == sorted(sq)

    def test_drops_interior_and_collinear(self):
        hull = convex_hull([(0, 0), (2, 0), (2, 2), (0, 2), (1, 1), (1, 0)])
        assert sorted(hull) == [(0, 0), (0, 2), (2, 0), (2, 2)]

    def test_counter_clockwise(self, rng):
        assert polygon_area(convex_hull([tuple(p) for p in rng.normal(size=(30, 2))])) > 0

    def test_contains_all_inputs(self, rng):
        pts = [tuple(p) for p in rng.uniform(-5, 5, size=(100, 2))]
        hull = convex_hull(pts)
        assert all(point_in_convex_polygon(hull, x, y) for x, y in pts)

    def test_collinear_raises(self):
        with pytest.raises(DegenerateGeometryError):
            convex_hull([(0, 0), (1, 1), (2, 2)])


class TestIntersection:
    unit = [(0, 0), (1, 0), (1, 1), (0, 1)]

    def test_identical(self):
        assert polygon_intersection_area(self.unit, self.unit) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        assert polygon_intersection_area(self.unit, [(3, 0), (4, 0), (4, 1), (3, 1)]) == 0.0

    def test_rotated_square_octagon(self):
        a = OrientedBox(0.5, 0.5, 1, 1, 0)
        b = OrientedBox(0.5, 0.5, 1, 1, math.pi / 4)
        assert polygon_intersection_area(a, b) == pytest.approx(2 * (math.sqrt(2) - 1), abs=1e-9)

    def test_symmetric(self, rng):
        for _ in range(50):
            a, b = random_box(rng, 4), random_box(rng, 4)
            assert polygon_intersection_area(a, b) == pytest.approx(polygon_intersection_area(b, a), abs=1e-9)


class TestIoU:
    def test_self(self):
        b = OrientedBox(1, 2, 5, 3, 0.4)
        assert obb_iou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_offset_squares(self):
        assert obb_iou(OrientedBox(0, 0, 2, 2), OrientedBox(1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-12)

    def test_closed_form_45_degrees(self):
        r = 2 * (math.sqrt(2) - 1)
        iou = obb_iou(OrientedBox(0, 0, 1, 1, 0), OrientedBox(0, 0, 1, 1, math.pi / 4))
        assert iou == pytest.approx(r / (2 - r), abs=1e-9)

    @given(boxes(), boxes())
    def test_exact_symmetry_and_range(self, a, b):
        assert obb_iou(a, b) == obb_iou(b, a)
        assert 0.0 <= obb_iou(a, b) <= 1.0 + 1e-12

    @given(boxes(), boxes(), angle, coord, coord)
    def test_rigid_motion_invariance(self, a, b, phi, tx, ty):
        moved = [rotate_box(OrientedBox(x.cx + tx, x.cy + ty, x.w, x.h, x.theta), phi, 3.0, -2.0) for x in (a, b)]
        assert obb_iou(*moved) == pytest.approx(obb_iou(a, b), abs=1e-9)
        if obb_iou(a, b) > 0:
            assert giou(*moved) == pytest.approx(giou(a, b), abs=1e-9)

    def test_monte_carlo_sample(self, rng):
        for _ in range(10):
            a, b = random_box(rng, 3), random_box(rng, 3)
            assert abs(obb_iou(a, b) - mc_iou(a.as_tuple(), b.as_tuple(), 200_000, rng)) < 0.01


class TestGIoU:
    def test_identical(self):
        b = OrientedBox(0, 0, 3, 1, 0.3)
        assert giou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_unit_squares(self):
        g = giou([(0, 0), (1, 0), (1, 1), (0, 1)], [(2, 0), (3, 0), (3, 1), (2, 1)])
        assert g == pytest.approx(-1 / 3, abs=1e-12)

    def test_never_exceeds_iou(self, rng):
        for _ in range(1000):
            a, b = random_box(rng), random_box(rng)
            assert giou(a, b) <= obb_iou(a, b) + 1e-12
            assert giou(a, b) > -1.0


class TestAspectRatio:
    def test_values(self):
        assert aspect_ratio(OrientedBox(0, 0, 2, 2)) == 1.0
        assert aspect_ratio(OrientedBox(0, 0, 4, 2)) == 2.0

    @given(boxes(), angle)
    def test_rotation_invariant(self, b, phi):
        assert aspect_ratio(rotate_box(b, phi)) == pytest.approx(aspect_ratio(b), rel=1e-12)
        assert aspect_ratio(b) >= 1.0
