"""Rotated-rectangle and convex-polygon geometry.

Polygon routines are written with plain arithmetic and comparisons only, so
they accept points whose coordinates are floats or :class:`Dual` numbers.
The latter carry derivatives with respect to a fixed set of inputs and are
what the differentiable GIoU loss runs on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MIN_EDGE = 1e-6
AREA_EPS = 1e-12

Point = tuple  # (x, y); coordinates are float or Dual


class DegenerateGeometryError(ValueError):
    """Zero-area box, quad, or hull."""


class Dual:
    """Forward-mode dual number: a value plus a gradient vector."""

    __slots__ = ("v", "g")

    def __init__(self, v: float, g: np.ndarray):
        self.v = v
        self.g = g

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v + o.v, self.g + o.g)
        return Dual(self.v + o, self.g)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v - o.v, self.g - o.g)
        return Dual(self.v - o, self.g)

    def __rsub__(self, o):
        return Dual(o - self.v, -self.g)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v * o.v, self.g * o.v + o.g * self.v)
        return Dual(self.v * o, self.g * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v / o.v, (self.g * o.v - o.g * self.v) / (o.v * o.v))
        return Dual(self.v / o, self.g / o)

    def __rtruediv__(self, o):
        return Dual(o / self.v, -o * self.g / (self.v * self.v))

    def __neg__(self):
        return Dual(-self.v, -self.g)

    def __float__(self):
        return float(self.v)

    def _cmp(self, o):
        return o.v if isinstance(o, Dual) else o

    def __lt__(self, o):
        return self.v < self._cmp(o)

    def __le__(self, o):
        return self.v <= self._cmp(o)

    def __gt__(self, o):
        return self.v > self._cmp(o)

    def __ge__(self, o):
        return self.v >= self._cmp(o)

    def __repr__(self):
        return f"Dual({self.v!r})"


def value(x) -> float:
    return x.v if isinstance(x, Dual) else float(x)


def canonical_angle(theta: float) -> float:
    """Wrap an angle into [-pi/2, pi/2)."""
    t = math.fmod(theta + math.pi / 2, math.pi)
    if t < 0:
        t += math.pi
    t -= math.pi / 2
    if t >= math.pi / 2:
        t -= math.pi
    return t


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle under the long-edge convention.

    ``w`` is the long edge, ``theta`` the angle of the long edge from +x,
    wrapped into [-pi/2, pi/2). Construction canonicalizes: edges are swapped
    if needed and squares have theta reduced into [-pi/4, pi/4).
    """

    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        w, h, theta = float(self.w), float(self.h), float(self.theta)
        if not all(math.isfinite(v) for v in (self.cx, self.cy, w, h, theta)):
            raise DegenerateGeometryError("non-finite box parameters")
        if min(w, h) <= MIN_EDGE:
            raise DegenerateGeometryError(f"box edge too small: w={w}, h={h}")
        if h > w:
            w, h = h, w
            theta += math.pi / 2
        theta = canonical_angle(theta)
        if w - h <= 1e-12 * w:
            theta = math.fmod(theta + math.pi / 4, math.pi / 2)
            if theta < 0:
                theta += math.pi / 2
            theta -= math.pi / 4
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "theta", theta)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.theta)

    def contains(self, x: float, y: float, tol: float = 1e-9) -> bool:
        """Whether (x, y) lies inside or on the box boundary."""
        u, v = to_box_frame(self, x, y)
        return abs(u) <= self.w / 2 + tol and abs(v) <= self.h / 2 + tol


def to_box_frame(box: OrientedBox, x: float, y: float) -> tuple[float, float]:
    """Offset of (x, y) from the box center, projected on the long and short axes."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = x - box.cx, y - box.cy
    return dx * c + dy * s, -dx * s + dy * c


def obb_to_corners(b: OrientedBox) -> np.ndarray:
    """Four corners, counter-clockwise, as a (4, 2) array."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    hw, hh = b.w / 2, b.h / 2
    local = ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh))
    return np.array([(b.cx + u * c - v * s, b.cy + u * s + v * c) for u, v in local])


def canonical_quad(corners) -> np.ndarray:
    """Reorder four corners into counter-clockwise winding.

    Raises DegenerateGeometryError for zero-area or non-convex input.
    """
    q = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    hull = convex_hull([tuple(p) for p in q])
    if len(hull) != 4:
        raise DegenerateGeometryError("quad is not strictly convex")
    return np.array(hull, dtype=np.float64)


def corners_to_obb(points) -> OrientedBox:
    """Minimum-area enclosing rotated rectangle (rotating calipers over hull edges)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hull = np.array(convex_hull([tuple(p) for p in pts]), dtype=np.float64)
    best = None
    n = len(hull)
    for i in range(n):
        edge = hull[(i + 1) % n] - hull[i]
        phi = math.atan2(edge[1], edge[0])
        c, s = math.cos(phi), math.sin(phi)
        u = hull[:, 0] * c + hull[:, 1] * s
        v = -hull[:, 0] * s + hull[:, 1] * c
        du, dv = u.max() - u.min(), v.max() - v.min()
        area = du * dv
        if best is None or area < best[0] - 1e-12 * max(area, 1.0):
            mu, mv = (u.max() + u.min()) / 2, (v.max() + v.min()) / 2
            best = (area, mu * c - mv * s, mu * s + mv * c, du, dv, phi)
    _, cx, cy, du, dv, phi = best
    return OrientedBox(cx, cy, du, dv, phi)


def cross(o: Point, a: Point, b: Point):
    """z-component of (a - o) x (b - o)."""
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: Sequence[Point]) -> list[Point]:
    """Andrew's monotone chain; counter-clockwise, collinear points dropped."""
    if len(points) < 3:
        raise DegenerateGeometryError("convex hull needs at least 3 points")
    pts = sorted(points, key=lambda p: (value(p[0]), value(p[1])))
    lower: list[Point] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[Point] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3 or value(polygon_area(hull)) <= AREA_EPS:
        raise DegenerateGeometryError("all points are collinear")
    return hull


def polygon_area(poly: Sequence[Point]):
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc = acc + (x0 * y1 - x1 * y0)
    return acc * 0.5


def clip_polygon(subject: Sequence[Point], clipper: Sequence[Point]) -> list[Point]:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW ``clipper``."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        inp, out = out, []
        prev = inp[-1]
        sp = cross(a, b, prev)
        for cur in inp:
            sc = cross(a, b, cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cut(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cut(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _cut(p: Point, q: Point, sp, sq) -> Point:
    t = sp / (sp - sq)
    return (p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t)


def _as_polygon(shape) -> list[Point]:
    if isinstance(shape, OrientedBox):
        return [tuple(p) for p in obb_to_corners(shape)]
    if isinstance(shape, np.ndarray):
        return [tuple(p) for p in shape.reshape(-1, 2)]
    return [tuple(p) for p in shape]


def polygon_intersection_area(p, q):
    """Area of the intersection of two convex CCW polygons."""
    p, q = _as_polygon(p), _as_polygon(q)
    inter = clip_polygon(p, q)
    if len(inter) < 3:
        return 0.0
    area = polygon_area(inter)
    return area if value(area) > AREA_EPS else 0.0 * area


def obb_iou(a: OrientedBox, b: OrientedBox) -> float:
    # clip in a fixed argument order so iou(a, b) == iou(b, a) bit for bit
    if (a.as_tuple()) > (b.as_tuple()):
        a, b = b, a
    inter = polygon_intersection_area(a, b)
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def giou(a, b):
    """Generalized IoU with the convex hull of both corner sets as enclosing shape.

    ``a`` and ``b`` may be OrientedBoxes, corner arrays, or point lists. A
    non-convex or self-intersecting quad is replaced by the hull of its corners.
    Coordinates may be Dual numbers; the result then carries gradients.
    """
    pa, pb = _as_polygon(a), _as_polygon(b)
    ha, hb = _hull_or_none(pa), _hull_or_none(pb)
    area_a = polygon_area(ha) if ha else 0.0
    area_b = polygon_area(hb) if hb else 0.0
    inter = polygon_intersection_area(ha, hb) if ha and hb else 0.0
    union = area_a + area_b - inter
    enclosing = polygon_area(convex_hull(pa + pb))
    if value(union) <= AREA_EPS:
        raise DegenerateGeometryError("both shapes have zero area")
    iou = inter / union
    return iou - (enclosing - union) / enclosing


def _hull_or_none(poly):
    try:
        return convex_hull(poly)
    except DegenerateGeometryError:
        return None


def aspect_ratio(b: OrientedBox) -> float:
    """Long edge over short edge; at least 1 under the long-edge convention."""
    return b.w / b.h


def point_in_convex_polygon(poly: Sequence[Point], x: float, y: float, tol: float = 1e-9) -> bool:
    """Inside-or-on test for a counter-clockwise convex polygon."""
    n = len(poly)
    for i in range(n):
        if cross(poly[i], poly[(i + 1) % n], (x, y)) < -tol:
            return False
    return True


def rotate_box(b: OrientedBox, phi: float, ox: float = 0.0, oy: float = 0.0) -> OrientedBox:
    """Rigidly rotate a box by ``phi`` about (ox, oy)."""
    c, s = math.cos(phi), math.sin(phi)
    dx, dy = b.cx - ox, b.cy - oy
    return OrientedBox(ox + dx * c - dy * s, oy + dx * s + dy * c, b.w, b.h, b.theta + phi)
