"""Central-difference gradient checks for every differentiable op and the full model.

Inputs are drawn away from the kinks of relu, abs, clip, and min so that the
finite differences see a smooth function.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from p2det import tensor as T
from p2det.fusion import attention, encode_image, fuse, init_attention, init_image_encoder, init_two_way_block, two_way_block
from p2det.geometry import OrientedBox, obb_to_corners
from p2det.losses import bc_loss, focal_loss, giou_loss, head_loss_d1, head_loss_d2, quality_weighted_mean
from p2det.prompt_encoder import FourierMap, PointPrompt, encode_prompts
from p2det.tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _projected(f: Callable[[Tensor], Tensor], rng) -> Callable[[Tensor], Tensor]:
    """Turn a tensor-valued f into a scalar via a fixed random projection."""
    cache = {}

    def g(x):
        y = f(x)
        if "r" not in cache:
            cache["r"] = rng.normal(size=y.shape)
        return T.tsum(y * cache["r"])

    return g


def _param_checks(name, params, loss_fn, rng, per_tensor, eps):
    """Check a few coordinates of every parameter tensor through ``loss_fn(params)``."""
    worst = 0.0
    for key in sorted(params):
        orig = params[key]

        def f(t, key=key):
            params[key] = t
            return loss_fn(params)

        size = orig.data.size
        coords = rng.choice(size, size=min(per_tensor, size), replace=False)
        x = Tensor(orig.data.copy())
        try:
            worst = max(worst, T.grad_check(f, x, eps=eps, coords=coords))
        finally:
            params[key] = orig
        for t in params.values():
            t.grad = None
    return worst


def _op_checks(rng, eps):
    pos = lambda shape: rng.uniform(0.3, 2.0, size=shape)
    a_mat = Tensor(rng.normal(size=(3, 4)))
    b_mat = Tensor(rng.normal(size=(4, 5)))
    other = rng.normal(size=(3, 4))
    ln_g, ln_b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    lin_w, lin_b = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=2))
    cw, cb = Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=3))
    dw = Tensor(rng.normal(size=(3, 1, 3, 3)))
    checks = {
        "add": (lambda t: T.add(t, other), rng.normal(size=(3, 4))),
        "sub": (lambda t: T.sub(other, t), rng.normal(size=(3, 4))),
        "mul": (lambda t: T.mul(t, t[::-1]), rng.normal(size=(3, 4))),
        "div": (lambda t: T.div(other, t), pos((3, 4))),
        "power": (lambda t: T.power(t, 2.5), pos((3, 4))),
        "exp": (T.exp, rng.normal(size=(3, 4))),
        "log": (T.log, pos((3, 4))),
        "sqrt": (T.sqrt, pos((3, 4))),
        "abs": (T.absolute, _away_from_zero(rng, (3, 4))),
        "clip": (lambda t: T.clip(t, -0.5, 0.5), np.concatenate([rng.uniform(-0.4, 0.4, 6), _away_from_zero(rng, 6, 0.7, 1.5)])),
        "tanh": (T.tanh, rng.normal(size=(3, 4))),
        "sigmoid": (T.sigmoid, rng.normal(size=(3, 4))),
        "relu": (T.relu, _away_from_zero(rng, (3, 4))),
        "gelu": (T.gelu, rng.normal(size=(3, 4)) * 2),
        "sum": (lambda t: T.tsum(t, axis=1), rng.normal(size=(3, 4))),
        "mean": (lambda t: T.mean(t, axis=0, keepdims=True), rng.normal(size=(3, 4))),
        "min": (lambda t: T.tmin(t, axis=1), rng.permutation(12).reshape(3, 4) * 0.5 + 0.01 * rng.normal(size=(3, 4))),
        "reshape_transpose": (lambda t: T.transpose(T.reshape(t, (2, 6)), (1, 0)), rng.normal(size=(3, 4))),
        "getitem": (lambda t: t[np.array([2, 0, 2])], rng.normal(size=(3, 4))),
        "concat_stack": (lambda t: T.stack([T.concat([t, t * 2.0], axis=1), T.concat([t * t, t], axis=1)]), rng.normal(size=(3, 4))),
        "matmul_left": (lambda t: T.matmul(t, b_mat), a_mat.data.copy()),
        "matmul_right": (lambda t: T.matmul(a_mat, t), b_mat.data.copy()),
        "matmul_batched": (lambda t: T.matmul(t, T.transpose(t, (0, 2, 1))), rng.normal(size=(2, 3, 4))),
        "softmax": (lambda t: T.softmax(t, axis=-1), rng.normal(size=(3, 4))),
        "layernorm": (lambda t: T.layernorm(t, ln_g, ln_b), rng.normal(size=(3, 4))),
        "linear": (lambda t: T.linear(t, lin_w, lin_b), rng.normal(size=(3, 4))),
        "conv2d": (lambda t: T.conv2d(t, cw, cb, pad=1), rng.normal(size=(2, 5, 5))),
        "conv2d_strided": (lambda t: T.conv2d(t, cw, stride=2, pad=1), rng.normal(size=(2, 2, 6, 6))),
        "conv2d_depthwise": (lambda t: T.conv2d(t, dw, pad=1, groups=3), rng.normal(size=(3, 4, 4))),
        "conv2d_weight": (lambda t: T.conv2d(Tensor(np.linspace(-1, 1, 50).reshape(2, 5, 5)), t, stride=2), rng.normal(size=(3, 2, 3, 3))),
        "bilinear_upsample": (lambda t: T.bilinear_upsample(t, 7, 9), rng.normal(size=(2, 3, 4))),
    }
    results = []
    for name, (f, x) in checks.items():
        t0 = time.perf_counter()
        err = T.grad_check(_projected(f, rng), Tensor(np.array(x, dtype=np.float64)), eps=eps)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results


def _geometry_checks(rng, eps):
    gts = [OrientedBox(10.0, 12.0, 9.0, 4.0, 0.4), OrientedBox(30.0, 8.0, 6.0, 5.0, -1.1), OrientedBox(5.0, 5.0, 7.0, 2.5, 1.2)]
    # overlapping, disjoint, and contained predictions
    preds = np.stack([
        obb_to_corners(OrientedBox(11.0, 11.0, 8.0, 5.0, 0.1)).ravel(),
        obb_to_corners(OrientedBox(40.0, 20.0, 4.0, 3.0, 0.3)).ravel(),
        obb_to_corners(OrientedBox(5.2, 5.1, 3.0, 1.0, 1.0)).ravel(),
    ]) + rng.normal(scale=0.05, size=(3, 8))
    q = np.array([0.7, 0.4, 0.9])
    idx = np.arange(3)
    probs = rng.uniform(0.05, 0.95, size=(4, 5))
    targets = (rng.uniform(size=(4, 5)) > 0.7).astype(float)
    cases = {
        "focal_loss": (lambda t: T.tsum(focal_loss(T.sigmoid(t), targets)), rng.normal(size=(4, 5))),
        "focal_loss_prob": (lambda t: T.tsum(focal_loss(t, targets, 2.0, 0.25)), probs),
        "giou_loss": (lambda t: T.tsum(giou_loss(t, gts) * np.array([1.0, 0.5, 2.0])), preds),
        "bc_loss": (lambda t: T.tsum(bc_loss(t, gts) * np.array([1.0, 0.5, 2.0])), preds),
        "quality_weighted_mean": (lambda t: quality_weighted_mean(t * t, np.array([0, 0, 1]), q), rng.normal(size=3)),
        "head_loss_d1": (lambda t: head_loss_d1(t, gts, idx, q), preds),
        "head_loss_d1_unweighted_bc": (lambda t: head_loss_d1(t, gts, idx, q, bc_inside_weighting=False), preds),
        "head_loss_d2": (lambda t: head_loss_d2(t, gts, idx, q), preds),
    }
    results = []
    for name, (f, x) in cases.items():
        t0 = time.perf_counter()
        err = T.grad_check(f, Tensor(np.array(x, dtype=np.float64)), eps=eps)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results


def _network_checks(rng, eps, per_tensor):
    d, heads = 8, 2
    results = []
    fm = FourierMap(d // 2, seed=3)
    prng = np.random.Generator(np.random.PCG64(7))

    t0 = time.perf_counter()
    p_attn = init_attention(prng, d, "a")
    q_in, kv_in = Tensor(rng.normal(size=(3, d))), Tensor(rng.normal(size=(5, d)))
    r = rng.normal(size=(3, d))
    err = _param_checks("attention", p_attn, lambda p: T.tsum(attention(q_in, kv_in, kv_in, p, "a", heads) * r), rng, per_tensor, eps)
    err = max(err, T.grad_check(lambda t: T.tsum(attention(t, kv_in, kv_in, p_attn, "a", heads) * r), Tensor(q_in.data.copy()), eps=eps))
    err = max(err, T.grad_check(lambda t: T.tsum(attention(q_in, t, t, p_attn, "a", heads) * r), Tensor(kv_in.data.copy()), eps=eps))
    results.append(CheckResult("attention", err, time.perf_counter() - t0))

    t0 = time.perf_counter()
    p_blk = init_two_way_block(prng, d, "blk", block_conv=True)
    toks, img = Tensor(rng.normal(size=(3, d))), Tensor(rng.normal(size=(16, d)))
    pe_q, pe_k = Tensor(rng.normal(size=(3, d))), Tensor(rng.normal(size=(16, d)))
    r1, r2 = rng.normal(size=(3, d)), rng.normal(size=(16, d))

    def blk(p, tk=toks, im=img, pe_in_values=False):
        a, b = two_way_block(tk, im, pe_q, pe_k, p, "blk", heads, grid_hw=(4, 4), pe_in_values=pe_in_values)
        return T.tsum(a * r1) + T.tsum(b * r2)

    err = _param_checks("two_way_block", p_blk, blk, rng, per_tensor, eps)
    err = max(err, T.grad_check(lambda t: blk(p_blk, tk=t), Tensor(toks.data.copy()), eps=eps))
    err = max(err, T.grad_check(lambda t: blk(p_blk, im=t, pe_in_values=True), Tensor(img.data.copy()), eps=eps))
    results.append(CheckResult("two_way_block", err, time.perf_counter() - t0))

    t0 = time.perf_counter()
    p_enc = init_image_encoder(prng, d, 4, 1)
    image = Tensor(rng.normal(size=(1, 1, 8, 8)))
    r3 = rng.normal(size=(1, d, 2, 2))
    enc = lambda p, im=image: T.tsum(encode_image(im, p, fm, 4, 1, heads).grid * r3)
    err = max(_param_checks("encode_image", p_enc, enc, rng, per_tensor, eps),
              T.grad_check(lambda t: enc(p_enc, t), Tensor(image.data.copy()), eps=eps))
    results.append(CheckResult("encode_image", err, time.perf_counter() - t0))

    t0 = time.perf_counter()
    type_emb = Tensor(rng.normal(scale=0.1, size=(2, d)))
    prompts = [PointPrompt(2.0, 5.0), PointPrompt(6.5, 1.0)]
    p_fuse = dict(p_enc)
    p_fuse.update(init_two_way_block(prng, d, "fusion.block0"))
    r4 = rng.normal(size=(1, d, 8, 8))

    def fused(p, te=type_emb):
        sparse = T.stack([encode_prompts(prompts, fm, te, 4, 8)])
        return T.tsum(fuse(sparse, encode_image(image, p, fm, 4, 1, heads), p, 1, heads, (8, 8)) * r4)

    err = max(_param_checks("fuse", p_fuse, fused, rng, per_tensor, eps),
              T.grad_check(lambda t: fused(p_fuse, t), Tensor(type_emb.data.copy()), eps=eps))
    results.append(CheckResult("prompt_encoder_fuse", err, time.perf_counter() - t0))
    return results


def _model_check(rng, eps, per_tensor):
    from p2det.detector import AssignerSettings, Batch, LossSettings, Model, ModelConfig, compute_losses
    from p2det.synthgen import SceneConfig, gen_scene

    t0 = time.perf_counter()
    scfg = SceneConfig(size=32, towers_per_scene=(2, 2))
    scene = gen_scene(scfg, 11)
    cfg = ModelConfig(d=8, heads=2, patch=8, encoder_depth=1, fusion_depth=1, num_prompts=4, backbone_channels=4, head_channels=4)
    model = Model(cfg, init_seed=5)
    images = ((scene.image - scfg.norm_mean) / scfg.norm_std)[None]
    batch = Batch(images=images, gts=[list(scene.gts)], prompts=[list(scene.prompts)])

    # targets frozen at the unperturbed parameters
    _, _, targets = compute_losses(model, batch, AssignerSettings(), LossSettings())

    def loss(p):
        model.params = p
        return compute_losses(model, batch, AssignerSettings(), LossSettings(), targets)[0]

    err = _param_checks("model", dict(model.params), loss, rng, per_tensor, eps)
    return [CheckResult("detector_forward_total_loss", err, time.perf_counter() - t0)]


def run_suite(seed: int = 0, eps: float = 1e-5, per_tensor: int = 3) -> list[CheckResult]:
    """Every check in a fixed order; deterministic for a given seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return _op_checks(rng, eps) + _geometry_checks(rng, eps) + _network_checks(rng, eps, per_tensor) + _model_check(rng, eps, per_tensor)
