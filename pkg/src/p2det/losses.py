"""Detection losses: focal classification, GIoU and boundary-center regression,
quality-weighted per-object averaging, and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from p2det import tensor as T
from p2det.geometry import DegenerateGeometryError, Dual, OrientedBox, giou, obb_to_corners
from p2det.tensor import Tensor

P_CLAMP = 1e-7

_EYE8 = np.eye(8)
# 4 cyclic shifts x 2 windings of corner indices
CORNER_ORDERINGS = np.array([np.roll(np.arange(4), s) for s in range(4)] + [np.roll(np.arange(4)[::-1], s) for s in range(4)])


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_d1: float
    l_d2: float
    total: float
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def as_dict(self) -> dict[str, float]:
        return {"l_cls": self.l_cls, "l_d1": self.l_d1, "l_d2": self.l_d2, "total": self.total}


def focal_loss(p, y, gamma: float = 2.0, alpha_bal: float = 0.25) -> Tensor:
    """Elementwise focal loss of probabilities ``p`` against binary targets ``y``."""
    p = T.clip(T.as_tensor(p), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = alpha_bal * y + (1.0 - alpha_bal) * (1.0 - y)
    modulator = (1.0 - p_t) ** gamma if gamma else 1.0
    return -1.0 * (alpha_t * modulator * T.log(p_t))


def _quad_points(row: np.ndarray, with_grad: bool):
    if not with_grad:
        return [(row[2 * k], row[2 * k + 1]) for k in range(4)]
    return [(Dual(row[2 * k], _EYE8[2 * k]), Dual(row[2 * k + 1], _EYE8[2 * k + 1])) for k in range(4)]


def _as_corner_rows(gts) -> np.ndarray:
    rows = []
    for g in gts:
        rows.append(obb_to_corners(g).ravel() if isinstance(g, OrientedBox) else np.asarray(g, dtype=np.float64).ravel())
    return np.array(rows).reshape(-1, 8)


def giou_loss(pred, gts) -> Tensor:
    """``1 - GIoU`` per row of ``pred`` (P, 8) against matching GT shapes.

    The predicted quad enters through the convex hull of its corners.
    Gradients are exact almost everywhere (forward-mode through clipping).
    """
    pred = T.as_tensor(pred)
    rows = pred.data.reshape(-1, 8)
    gt_rows = _as_corner_rows(gts)
    P = len(rows)
    vals = np.empty(P)
    jac = np.zeros((P, 8))
    for i in range(P):
        gt_poly = _quad_points(gt_rows[i], False)
        try:
            g = giou(_quad_points(rows[i], pred.requires_grad), gt_poly)
        except DegenerateGeometryError:
            # predicted corners coincide: no usable shape, constant max loss
            vals[i] = 2.0
            continue
        if isinstance(g, Dual):
            vals[i] = 1.0 - g.v
            jac[i] = -g.g
        else:
            vals[i] = 1.0 - float(g)
    out = T.custom_op(vals, (pred,), lambda g: ((g[:, None] * jac).reshape(pred.shape),))
    return out


def bc_loss(pred, gts) -> Tensor:
    """Boundary-center loss per predicted quad.

    Center L1 offset plus the mean matched-corner L1 distance, both divided
    by the GT diagonal. Corners are matched under the best of the 8 cyclic
    orderings and windings, so the starting corner of ``pred`` is irrelevant.
    """
    single = isinstance(gts, OrientedBox)
    gts = [gts] if single else list(gts)
    pred = T.reshape(T.as_tensor(pred), (-1, 4, 2))
    gt_c = np.array([obb_to_corners(g) for g in gts])  # (P, 4, 2)
    diag = np.array([np.hypot(g.w, g.h) for g in gts])[:, None]
    if np.any(diag <= 0):
        raise DegenerateGeometryError("degenerate GT box")
    gt_center = np.array([(g.cx, g.cy) for g in gts])
    center = T.absolute(T.mean(pred, axis=1) - gt_center).sum(axis=1, keepdims=True) / diag
    permuted = gt_c[:, CORNER_ORDERINGS]  # (P, 8, 4, 2)
    dists = T.absolute(T.reshape(pred, (-1, 1, 4, 2)) - permuted).sum(axis=(2, 3))
    corner = T.tmin(dists, axis=1) * 0.25 / diag[:, 0]
    out = T.reshape(center, (-1,)) + corner
    return T.reshape(out, ()) if single else out


def quality_weighted_mean(per_sample: Tensor, gt_index: np.ndarray, q: np.ndarray) -> Tensor:
    """Average over GTs of the Q-weighted mean of their samples' losses.

    GTs without positives are left out of the average. Returns a scalar
    tensor (zero when nothing is positive).
    """
    gt_index = np.asarray(gt_index)
    q = np.asarray(q, dtype=np.float64)
    gts = np.unique(gt_index)
    if gts.size == 0:
        return T.tsum(T.as_tensor(per_sample) * 0.0)
    weights = np.zeros(len(gt_index))
    for g in gts:
        sel = gt_index == g
        weights[sel] = q[sel] / q[sel].sum()
    weights /= gts.size
    return T.tsum(T.as_tensor(per_sample) * weights)


def head_loss_d1(
    preds,
    gts: Sequence[OrientedBox],
    gt_index: np.ndarray,
    q: np.ndarray,
    bc_inside_weighting: bool = True,
) -> Tensor:
    """Initial-head regression loss.

    ``preds`` (P, 8) are the positive samples' quads, ``gt_index`` their
    matched GT and ``q`` their quality. GIoU loss and boundary-center loss are
    summed per sample inside the quality-weighted mean; with
    ``bc_inside_weighting=False`` the boundary-center term is averaged
    without weights instead.
    """
    if len(gt_index) == 0:
        return T.tsum(T.as_tensor(preds) * 0.0)
    matched = [gts[i] for i in gt_index]
    reg = giou_loss(preds, matched)
    bc = bc_loss(preds, matched)
    if bc_inside_weighting:
        return quality_weighted_mean(reg + bc, gt_index, q)
    return quality_weighted_mean(reg, gt_index, q) + quality_weighted_mean(bc, gt_index, np.ones(len(q)))


def head_loss_d2(preds, gts: Sequence[OrientedBox], gt_index: np.ndarray, q: np.ndarray) -> Tensor:
    """Refinement-head regression loss: quality-weighted GIoU loss only."""
    if len(gt_index) == 0:
        return T.tsum(T.as_tensor(preds) * 0.0)
    return quality_weighted_mean(giou_loss(preds, [gts[i] for i in gt_index]), gt_index, q)


def total_loss(l_cls, l_d1, l_d2, lambdas: Sequence[float] = (1.0, 1.0, 1.0)) -> LossBreakdown:
    l1, l2, l3 = (float(v) for v in lambdas)
    c, d1, d2 = float(l_cls), float(l_d1), float(l_d2)
    return LossBreakdown(c, d1, d2, l1 * c + l2 * d1 + l3 * d2, (l1, l2, l3))
