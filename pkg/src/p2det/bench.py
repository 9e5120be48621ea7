"""Throughput of the hot geometry and attention kernels."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from p2det import tensor as T
from p2det.fusion import attention, init_attention
from p2det.geometry import OrientedBox, corners_to_obb, giou, obb_iou, obb_to_corners
from p2det.losses import giou_loss
from p2det.tensor import Tensor


def _rate(fn: Callable[[], object], seconds: float) -> float:
    fn()  # warm-up
    n, start = 0, time.perf_counter()
    while True:
        fn()
        n += 1
        elapsed = time.perf_counter() - start
        if elapsed >= seconds:
            return n / elapsed


def run_bench(seconds: float = 0.5, seed: int = 0) -> dict[str, float]:
    rng = np.random.Generator(np.random.PCG64(seed))
    a = OrientedBox(10.0, 10.0, 12.0, 4.0, 0.3)
    b = OrientedBox(11.0, 9.5, 10.0, 5.0, -0.4)
    quad = obb_to_corners(b).ravel()
    preds = Tensor(np.tile(quad, (16, 1)) + rng.normal(scale=0.3, size=(16, 8)), requires_grad=True)
    gts16 = [a] * 16
    d, heads = 64, 4
    p = init_attention(rng, d, "a")
    q = Tensor(rng.normal(size=(8, d)), requires_grad=True)
    kv = Tensor(rng.normal(size=(64, d)), requires_grad=True)

    def attn_fwd():
        with T.no_grad():
            attention(q, kv, kv, p, "a", heads)

    def attn_fwd_bwd():
        for t in (q, kv, *p.values()):
            t.grad = None
        T.tsum(attention(q, kv, kv, p, "a", heads)).backward()

    def giou_fwd_bwd():
        preds.grad = None
        T.tsum(giou_loss(preds, gts16)).backward()

    return {
        "obb_iou": _rate(lambda: obb_iou(a, b), seconds),
        "giou": _rate(lambda: giou(a, b), seconds),
        "corners_to_obb": _rate(lambda: corners_to_obb(quad.reshape(4, 2)), seconds),
        "giou_loss_16_fwd_bwd": _rate(giou_fwd_bwd, seconds),
        "attention_8x64_fwd": _rate(attn_fwd, seconds),
        "attention_8x64_fwd_bwd": _rate(attn_fwd_bwd, seconds),
    }
