"""Shape-adaptive label assignment for anchor-free sample points.

Per ground-truth box: pick the ``top_k`` nearest sample points as candidates,
score each with the IoU of a stride-sized square around it, derive an IoU
threshold from the candidate mean and spread decayed by the box aspect ratio,
and keep candidates that clear it and sit inside the box. Positives carry a
quality weight that decays with a shape-normalized distance to the box center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from p2det.geometry import OrientedBox, aspect_ratio, obb_iou, to_box_frame

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class SamplePoint:
    x: float
    y: float
    stride: float

    def proxy_box(self) -> OrientedBox:
        return OrientedBox(self.x, self.y, self.stride, self.stride, 0.0)


@dataclass
class AssignmentResult:
    """Per-sample labels: the matched GT index for positives, ``NEGATIVE`` otherwise.

    ``quality`` is zero for non-positives. ``thresholds`` records the IoU
    threshold used for each GT (NaN for GTs never evaluated).
    """

    labels: np.ndarray
    quality: np.ndarray
    thresholds: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.labels >= 0))


def grid_samples(size: int, stride: int) -> list[SamplePoint]:
    """Cell-center sample points of a stride-``stride`` grid, row-major."""
    n = size // stride
    off = (stride - 1) / 2.0
    return [SamplePoint(j * stride + off, i * stride + off, stride) for i in range(n) for j in range(n)]


def iou_stats(ious: Sequence[float]) -> tuple[float, float]:
    """Population mean and standard deviation."""
    arr = np.asarray(ious, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("iou_stats of an empty candidate set")
    mu = float(arr.mean())
    return mu, float(np.sqrt(np.mean((arr - mu) ** 2)))


def shape_factor(alpha: float, w: float) -> float:
    return math.exp(-w * alpha)


def adaptive_threshold(mu: float, sigma: float, alpha: float, w: float) -> float:
    return shape_factor(alpha, w) * (mu + sigma)


def shape_distance(sample: SamplePoint, gt: OrientedBox, rotated_frame: bool = True, exponent: int = 1) -> float:
    """Center offset normalized by box width and height.

    With ``rotated_frame`` the offset is taken along the box's own axes;
    otherwise raw image x/y offsets are used. ``exponent`` is the power on the
    width/height denominators.
    """
    if rotated_frame:
        du, dv = to_box_frame(gt, sample.x, sample.y)
    else:
        du, dv = sample.x - gt.cx, sample.y - gt.cy
    return math.sqrt(du * du / gt.w**exponent + dv * dv / gt.h**exponent)


def quality(D: float) -> float:
    return math.exp(-D)


def assign(
    samples: Sequence[SamplePoint],
    gt_boxes: Sequence[OrientedBox],
    w: float = 2.0,
    top_k: int = 9,
    rotated_frame: bool = True,
    distance_exponent: int = 1,
    fixed_threshold: float | None = None,
) -> AssignmentResult:
    """Label every sample positive (with a GT index) or negative.

    ``fixed_threshold`` replaces the adaptive threshold with a constant, which
    is how the fixed-threshold ablation runs.
    """
    if not samples:
        raise ValueError("assign needs at least one sample point")
    n = len(samples)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    qual = np.zeros(n)
    thresholds = np.full(len(gt_boxes), np.nan)
    if not gt_boxes:
        return AssignmentResult(labels, qual, thresholds)

    xs = np.array([s.x for s in samples])
    ys = np.array([s.y for s in samples])
    # (Q, -area, -index) of the best claim so far, per sample
    best: dict[int, tuple[float, float, int]] = {}
    for gi, gt in enumerate(gt_boxes):
        dist = np.hypot(xs - gt.cx, ys - gt.cy)
        order = np.lexsort((ys, xs, dist))
        cand = order[: min(top_k, n)]
        ious = [obb_iou(samples[j].proxy_box(), gt) for j in cand]
        if fixed_threshold is None:
            mu, sigma = iou_stats(ious)
            thr = adaptive_threshold(mu, sigma, aspect_ratio(gt), w)
        else:
            thr = fixed_threshold
        thresholds[gi] = thr
        for j, iou in zip(cand, ious):
            s = samples[j]
            if iou < thr or not gt.contains(s.x, s.y):
                continue
            q = quality(shape_distance(s, gt, rotated_frame, distance_exponent))
            key = (q, -gt.area, -gi)
            if j not in best or key > best[j]:
                best[j] = key
                labels[j] = gi
                qual[j] = q
    return AssignmentResult(labels, qual, thresholds)
