"""Rotated-IoU detection metrics: greedy matching, all-point AP, and AR."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from p2det.geometry import OrientedBox, corners_to_obb, obb_iou


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MatchResult:
    """Greedy matching of one image's detections at one IoU threshold.

    ``order`` lists detection indices by descending score; ``tp`` and
    ``matched_gt`` are indexed like the input detections.
    """

    scores: np.ndarray
    tp: np.ndarray
    matched_gt: np.ndarray  # -1 for false positives
    gt_matched: np.ndarray
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def num_gt(self) -> int:
        return len(self.gt_matched)


def _box(det) -> OrientedBox:
    if isinstance(det, OrientedBox):
        return det
    quad = getattr(det, "quad", det)
    return corners_to_obb(np.asarray(quad).reshape(4, 2))


def match(dets, scores: Sequence[float], gts: Sequence[OrientedBox], iou_thresh: float) -> MatchResult:
    """Each detection, best score first, takes the highest-IoU unmatched GT with IoU >= thresh.

    Equal scores keep input order; equal IoUs go to the lower GT index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, m = len(dets), len(gts)
    order = np.argsort(-scores, kind="stable")
    boxes = [_box(d) for d in dets]
    tp = np.zeros(n, dtype=bool)
    matched_gt = np.full(n, -1, dtype=int)
    gt_matched = np.zeros(m, dtype=bool)
    for i in order:
        best, best_iou = -1, -1.0
        for g in range(m):
            if gt_matched[g]:
                continue
            iou = obb_iou(boxes[i], gts[g])
            if iou >= iou_thresh and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            tp[i] = True
            matched_gt[i] = best
            gt_matched[best] = True
    return MatchResult(scores, tp, matched_gt, gt_matched, order)


def precision_recall(results: Sequence[MatchResult]) -> tuple[np.ndarray, np.ndarray]:
    """Dataset-level PR curve over detections sorted by descending score."""
    n_gt = sum(r.num_gt for r in results)
    if n_gt == 0:
        raise UndefinedMetricError("precision/recall undefined without ground truth")
    scores = np.concatenate([r.scores for r in results]) if results else np.zeros(0)
    tp = np.concatenate([r.tp for r in results]) if results else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    tps = np.cumsum(tp[order])
    fps = np.cumsum(~tp[order])
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, 1)
    return precision, recall


def average_precision(results: Sequence[MatchResult]) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    precision, recall = precision_recall(results)
    if precision.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[:-1]))


def average_recall(results: Sequence[MatchResult]) -> float:
    """Fraction of GTs matched by some detection (callers cap detections per image)."""
    n_gt = sum(r.num_gt for r in results)
    if n_gt == 0:
        raise UndefinedMetricError("recall undefined without ground truth")
    return float(sum(int(r.gt_matched.sum()) for r in results) / n_gt)


def evaluate(per_image: Sequence[tuple[Sequence, Sequence[float], Sequence[OrientedBox]]], thresholds=(0.5, 0.75), max_dets: int = 100):
    """AP/AR at each threshold for a list of (dets, scores, gts) triples.

    Only detections with positive score count, at most ``max_dets`` per image.
    Returns (metrics dict, {threshold: (precision, recall)}).
    """
    metrics: dict[str, float] = {}
    curves = {}
    for thr in thresholds:
        results = []
        for dets, scores, gts in per_image:
            scores = np.asarray(scores, dtype=np.float64)
            keep = [i for i in np.argsort(-scores, kind="stable") if scores[i] > 0][:max_dets]
            results.append(match([dets[i] for i in keep], scores[keep], gts, thr))
        tag = f"{int(round(thr * 100))}"
        metrics[f"AP{tag}"] = average_precision(results)
        metrics[f"AR{tag}"] = average_recall(results)
        curves[thr] = precision_recall(results)
    return metrics, curves
