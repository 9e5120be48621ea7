"""Toy single-scale prompt-conditioned oriented detector.

Pipeline: prompt tokens and image embedding are fused, the fused map (with
the normalized image appended as an extra channel) goes through a small
strided conv backbone, and three conv heads produce per-cell class logits,
initial quad offsets, and refinement deltas. A quad is eight numbers: four
corner offsets from the cell center in units of the stride.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from p2det import tensor as T
from p2det.assigner import SamplePoint, assign, grid_samples
from p2det.fusion import Params, encode_image, fuse, init_image_encoder, init_two_way_block
from p2det.geometry import DegenerateGeometryError, OrientedBox, corners_to_obb, obb_iou, obb_to_corners
from p2det.losses import LossBreakdown, focal_loss, head_loss_d1, head_loss_d2, total_loss
from p2det.prompt_encoder import FourierMap, PointPrompt, PromptLabel, encode_prompts
from p2det.tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_QUAD = np.array([-1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0])
PRIOR_PROB = 0.01


class NumericalAbort(RuntimeError):
    """A loss or parameter became NaN/Inf during training.

    ``diagnostics`` is a JSON-serializable snapshot for post-mortem dumps.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    d: int = Field(64, ge=2)
    heads: int = Field(4, ge=1)
    patch: int = Field(8, ge=1)
    encoder_depth: int = Field(2, ge=0)
    fusion_depth: int = Field(2, ge=0)
    num_prompts: int = Field(8, ge=1)
    fourier_sigma: float = Field(1.0, gt=0)
    fourier_seed: int = Field(0, ge=0)
    pe_in_values: bool = False
    block_conv: bool = True
    use_prompts: bool = True
    backbone_channels: int = Field(32, ge=1)
    head_channels: int = Field(32, ge=1)
    stride: int = Field(4, ge=1)
    image_skip: bool = True
    detach_refine_input: bool = False
    cross_attn_init: Literal["random", "identity"] = "random"

    @model_validator(mode="after")
    def _check(self):
        if self.d % 2:
            raise ValueError("d: must be even (two Fourier slots per frequency)")
        if self.d % self.heads:
            raise ValueError("d: must be divisible by heads")
        if self.stride & (self.stride - 1):
            raise ValueError("stride: must be a power of two")
        return self


@dataclass
class Detection:
    quad: np.ndarray  # (4, 2), counter-clockwise
    score: float
    class_id: int = 0

    @property
    def box(self) -> OrientedBox:
        return corners_to_obb(self.quad)


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, G, G)
    init_quads: Tensor  # (B, G*G, 8) absolute pixel coords
    refined_quads: Tensor  # (B, G*G, 8)


class Model:
    """Parameters plus the fixed Fourier map; ``forward`` builds a fresh graph."""

    def __init__(self, cfg: ModelConfig, params: Params | None = None, init_seed: int = 0):
        self.cfg = cfg
        self.fm = FourierMap(m=cfg.d // 2, sigma=cfg.fourier_sigma, seed=cfg.fourier_seed)
        self.params = params if params is not None else init_params(cfg, init_seed)

    def forward(self, images: np.ndarray, prompts: Sequence[Sequence[PointPrompt]]) -> ForwardOutput:
        return forward(self, images, prompts)


def _conv_init(rng, cout, cin, k=3) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k)), requires_grad=True)


def init_params(cfg: ModelConfig, seed: int) -> Params:
    rng = np.random.Generator(np.random.PCG64(seed))
    d = cfg.d
    p: Params = {"prompt.type_embed": Tensor(rng.normal(0.0, 0.1, size=(len(PromptLabel), d)), requires_grad=True)}
    p.update(init_image_encoder(rng, d, cfg.patch, cfg.encoder_depth))
    for i in range(cfg.fusion_depth):
        p.update(init_two_way_block(rng, d, f"fusion.block{i}", cfg.block_conv))
        if cfg.cross_attn_init == "identity":
            # cell and prompt codes share one Fourier map, so identity
            # projections start cross-attention off position-matched
            for attn in ("t2i", "i2t"):
                for w in ("wq", "wk"):
                    p[f"fusion.block{i}.{attn}.{w}"].data[:] = np.eye(d)
    c = cfg.backbone_channels
    cin = d + (1 if cfg.image_skip else 0)
    n_down = int(round(math.log2(cfg.stride)))
    for i in range(n_down):
        p[f"backbone.down{i}.w"] = _conv_init(rng, c, cin)
        p[f"backbone.down{i}.b"] = Tensor(np.zeros(c), requires_grad=True)
        cin = c
    p["backbone.out.w"] = _conv_init(rng, c, cin)
    p["backbone.out.b"] = Tensor(np.zeros(c), requires_grad=True)
    hc = cfg.head_channels
    for head, cin_h, cout in (("cls", c, 1), ("reg", c, 8), ("refine", c + 8, 8)):
        p[f"head.{head}.0.w"] = _conv_init(rng, hc, cin_h)
        p[f"head.{head}.0.b"] = Tensor(np.zeros(hc), requires_grad=True)
        p[f"head.{head}.1.w"] = Tensor(rng.normal(0.0, 0.01, size=(cout, hc, 3, 3)), requires_grad=True)
        p[f"head.{head}.1.b"] = Tensor(np.zeros(cout), requires_grad=True)
    p["head.cls.1.b"].data[:] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    p["head.reg.1.b"].data[:] = DEFAULT_QUAD
    return p


def cell_centers(size: int, stride: int) -> np.ndarray:
    """(G*G, 2) pixel coordinates of cell centers, row-major."""
    return np.array([(s.x, s.y) for s in grid_samples(size, stride)])


def _head(x: Tensor, p: Params, name: str) -> Tensor:
    x = T.gelu(T.conv2d(x, p[f"head.{name}.0.w"], p[f"head.{name}.0.b"], pad=1))
    return T.conv2d(x, p[f"head.{name}.1.w"], p[f"head.{name}.1.b"], pad=1)


def forward(model: Model, images: np.ndarray, prompts: Sequence[Sequence[PointPrompt]]) -> ForwardOutput:
    """Run the detector on normalized images of shape (B, 1, S, S)."""
    cfg, p = model.cfg, model.params
    images = np.asarray(images, dtype=np.float64)
    B, _, S, S2 = images.shape
    if S != S2 or S % cfg.stride or S % cfg.patch:
        raise ValueError(f"image size {S}x{S2} incompatible with stride {cfg.stride} / patch {cfg.patch}")
    if len(prompts) != B:
        raise ValueError("one prompt list per image is required")
    tokens = T.stack(
        [encode_prompts(list(pr) if cfg.use_prompts else [], model.fm, p["prompt.type_embed"], cfg.num_prompts, S) for pr in prompts]
    )
    img = Tensor(images)
    emb = encode_image(img, p, model.fm, cfg.patch, cfg.encoder_depth, cfg.heads)
    x = fuse(tokens, emb, p, cfg.fusion_depth, cfg.heads, (S, S), cfg.pe_in_values, cfg.block_conv)
    if cfg.image_skip:
        x = T.concat([x, img], axis=1)
    i = 0
    while f"backbone.down{i}.w" in p:
        x = T.gelu(T.conv2d(x, p[f"backbone.down{i}.w"], p[f"backbone.down{i}.b"], stride=2, pad=1))
        i += 1
    feat = T.gelu(T.conv2d(x, p["backbone.out.w"], p["backbone.out.b"], pad=1))
    G = S // cfg.stride
    logits = T.reshape(_head(feat, p, "cls"), (B, G, G))
    init_off = _head(feat, p, "reg")  # (B, 8, G, G)
    init_det = init_off.detach() if cfg.detach_refine_input else init_off
    delta = _head(T.concat([feat, init_det], axis=1), p, "refine")
    refined_off = delta + init_det
    centers = np.tile(cell_centers(S, cfg.stride), (1, 4))  # (G*G, 8)

    def to_quads(off: Tensor) -> Tensor:
        flat = T.transpose(T.reshape(off, (B, 8, G * G)), (0, 2, 1))
        return flat * float(cfg.stride) + centers

    return ForwardOutput(logits, to_quads(init_off), to_quads(refined_off))


# -- training ------------------------------------------------------------------
class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(0.0025, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    grad_clip: float | None = Field(None, gt=0)
    batch_size: int = Field(4, ge=1)
    epochs: int = Field(120, ge=0)
    max_steps: int | None = Field(None, ge=0)
    init_seed: int = Field(0, ge=0)
    shuffle_seed: int = Field(0, ge=0)
    warmup_steps: int = Field(0, ge=0)
    schedule: Literal["constant", "cosine"] = "constant"
    prompt_dropout: float = Field(0.0, ge=0, le=1)


@dataclass
class AssignerSettings:
    w: float = 2.0
    top_k: int = 9
    rotated_frame: bool = True
    distance_exponent: int = 1
    fixed_threshold: float | None = None


@dataclass
class LossSettings:
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gamma: float = 2.0
    alpha_bal: float = 0.25
    bc_inside_weighting: bool = True


@dataclass
class Batch:
    images: np.ndarray  # normalized (B, 1, S, S)
    gts: list[list[OrientedBox]]
    prompts: list[list[PointPrompt]]


@dataclass
class Targets:
    """Assignment output for a batch, flattened over (image, cell).

    Regression rows index the (B * G * G) cells; GT indices run over the
    concatenation of the batch's GT lists.
    """

    cls: np.ndarray  # (B, G*G) binary
    init_rows: np.ndarray
    init_gt: np.ndarray
    init_q: np.ndarray
    ref_rows: np.ndarray
    ref_gt: np.ndarray
    ref_q: np.ndarray
    gts: list[OrientedBox]

    @property
    def num_positive(self) -> int:
        return len(self.init_rows)


def make_targets(out: ForwardOutput, batch: Batch, stride: int, asg: AssignerSettings) -> Targets:
    """Assign grid cells for the initial head, and refined-quad centers for the refinement head."""
    B, S = len(batch.images), batch.images.shape[-1]
    samples = grid_samples(S, stride)
    G2 = len(samples)
    cls = np.zeros((B, G2))
    acc = {k: [] for k in ("init_rows", "init_gt", "init_q", "ref_rows", "ref_gt", "ref_q")}
    all_gts: list[OrientedBox] = []
    kw = dict(w=asg.w, top_k=asg.top_k, rotated_frame=asg.rotated_frame,
              distance_exponent=asg.distance_exponent, fixed_threshold=asg.fixed_threshold)
    for b in range(B):
        gts = batch.gts[b]
        offset = len(all_gts)
        all_gts.extend(gts)
        res = assign(samples, gts, **kw)
        pos = np.flatnonzero(res.labels >= 0)
        cls[b, pos] = 1.0
        acc["init_rows"].extend(b * G2 + pos)
        acc["init_gt"].extend(res.labels[pos] + offset)
        acc["init_q"].extend(res.quality[pos])
        refined = out.refined_quads.data[b]
        moved = [SamplePoint(float(r[0::2].mean()), float(r[1::2].mean()), stride) for r in refined]
        res2 = assign(moved, gts, **kw)
        pos2 = np.flatnonzero(res2.labels >= 0)
        acc["ref_rows"].extend(b * G2 + pos2)
        acc["ref_gt"].extend(res2.labels[pos2] + offset)
        acc["ref_q"].extend(res2.quality[pos2])
    ints = {k: np.array(acc[k], dtype=int) for k in ("init_rows", "init_gt", "ref_rows", "ref_gt")}
    return Targets(cls=cls, init_q=np.array(acc["init_q"], dtype=float), ref_q=np.array(acc["ref_q"], dtype=float), gts=all_gts, **ints)


def losses_from_targets(out: ForwardOutput, targets: Targets, ls: LossSettings) -> tuple[Tensor, LossBreakdown]:
    B, G2 = targets.cls.shape
    probs = T.sigmoid(T.reshape(out.logits, (B, G2)))
    l_cls = T.tsum(focal_loss(probs, targets.cls, ls.gamma, ls.alpha_bal)) / max(1, targets.num_positive)
    init_flat = T.reshape(out.init_quads, (B * G2, 8))
    ref_flat = T.reshape(out.refined_quads, (B * G2, 8))
    l_d1 = head_loss_d1(init_flat[targets.init_rows], targets.gts, targets.init_gt, targets.init_q, ls.bc_inside_weighting)
    l_d2 = head_loss_d2(ref_flat[targets.ref_rows], targets.gts, targets.ref_gt, targets.ref_q)
    l1, l2, l3 = ls.lambdas
    total = l_cls * l1 + l_d1 * l2 + l_d2 * l3
    return total, total_loss(l_cls, l_d1, l_d2, ls.lambdas)


def compute_losses(
    model: Model, batch: Batch, asg: AssignerSettings, ls: LossSettings, targets: Targets | None = None
) -> tuple[Tensor, LossBreakdown, Targets]:
    """Forward, assign (unless ``targets`` are given), and build the total loss graph.

    Assignment is a non-differentiable target-selection step: labels and
    quality weights enter the loss as constants.
    """
    out = model.forward(batch.images, batch.prompts)
    if not (np.all(np.isfinite(out.logits.data)) and np.all(np.isfinite(out.refined_quads.data))):
        raise NumericalAbort("non-finite network outputs")
    if targets is None:
        targets = make_targets(out, batch, model.cfg.stride, asg)
    total, breakdown = losses_from_targets(out, targets, ls)
    return total, breakdown, targets


class SGD:
    """SGD with momentum: v = mu v + g; p -= lr v."""

    def __init__(self, params: Params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
        for k in sorted(self.params):
            t = self.params[k]
            g = grads[k] * scale
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            t.data -= lr * v
        return norm


def train_step(model: Model, batch: Batch, opt: SGD, asg: AssignerSettings, ls: LossSettings, lr: float | None = None) -> LossBreakdown:
    opt.zero_grad()
    total, breakdown, _ = compute_losses(model, batch, asg, ls)
    if not math.isfinite(breakdown.total):
        raise NumericalAbort("non-finite loss", {"losses": breakdown.as_dict()})
    total.backward()
    opt.step(lr)
    bad = [k for k, t in model.params.items() if not np.all(np.isfinite(t.data))]
    if bad:
        raise NumericalAbort("non-finite parameters after update", {"losses": breakdown.as_dict(), "bad_params": bad})
    return breakdown


def param_stats(params: Params) -> dict[str, dict[str, float]]:
    """Per-tensor max-abs and finiteness, for diagnostic dumps."""
    out = {}
    for k in sorted(params):
        d = params[k].data
        finite = np.isfinite(d)
        out[k] = {"max_abs": float(np.max(np.abs(d[finite]))) if finite.any() else None, "finite": bool(finite.all())}
    return out


def make_batch(scenes, norm_mean: float, norm_std: float) -> Batch:
    images = np.stack([(s.image - norm_mean) / norm_std for s in scenes])
    return Batch(images=images, gts=[list(s.gts) for s in scenes], prompts=[list(s.prompts) for s in scenes])


def train(
    model: Model,
    scenes: Sequence,
    tcfg: TrainConfig,
    asg: AssignerSettings,
    ls: LossSettings,
    norm: tuple[float, float],
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> list[LossBreakdown]:
    """Epoch loop with a seeded shuffle; returns the per-step loss history."""
    opt = SGD(model.params, tcfg.lr, tcfg.momentum, tcfg.weight_decay, tcfg.grad_clip)
    rng = np.random.Generator(np.random.PCG64(tcfg.shuffle_seed))
    # separate stream so enabling dropout leaves the shuffle order unchanged
    drop_rng = np.random.Generator(np.random.PCG64([tcfg.shuffle_seed, 1]))
    n = len(scenes)
    steps_per_epoch = max(1, math.ceil(n / tcfg.batch_size))
    total_steps = tcfg.epochs * steps_per_epoch
    if tcfg.max_steps is not None:
        total_steps = min(total_steps, tcfg.max_steps)
    history: list[LossBreakdown] = []
    step = 0
    while step < total_steps and n:
        order = rng.permutation(n)
        for start in range(0, n, tcfg.batch_size):
            if step >= total_steps:
                break
            chunk = [scenes[i] for i in order[start : start + tcfg.batch_size]]
            lr = _lr_at(step, total_steps, tcfg)
            batch = make_batch(chunk, *norm)
            if tcfg.prompt_dropout:
                keep = drop_rng.random(len(chunk)) >= tcfg.prompt_dropout
                batch.prompts = [pr if k else [] for pr, k in zip(batch.prompts, keep)]
            try:
                bd = train_step(model, batch, opt, asg, ls, lr)
            except NumericalAbort as exc:
                exc.diagnostics.update(step=step, lr=lr, params=param_stats(model.params),
                                       recent_losses=[h.as_dict() for h in history[-10:]])
                raise
            history.append(bd)
            if on_step is not None:
                on_step(step, bd)
            step += 1
    return history


def _lr_at(step: int, total: int, tcfg: TrainConfig) -> float:
    """Optional linear warmup, then constant or cosine-decayed rate."""
    if tcfg.warmup_steps and step < tcfg.warmup_steps:
        return tcfg.lr * (step + 1) / tcfg.warmup_steps
    if tcfg.schedule == "constant" or total <= 1:
        return tcfg.lr
    t = (step - tcfg.warmup_steps) / max(1, total - tcfg.warmup_steps)
    return tcfg.lr * 0.5 * (1 + math.cos(math.pi * min(t, 1.0)))


# -- inference -----------------------------------------------------------------
def rotated_nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy suppression in descending score order (stable for equal scores)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = [d.box for d in dets]
    keep: list[int] = []
    for i in order:
        if all(not _may_overlap(boxes[i], boxes[k]) or obb_iou(boxes[i], boxes[k]) <= iou_thresh for k in keep):
            keep.append(i)
    return [dets[i] for i in keep]


def _may_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    reach = 0.5 * (math.hypot(a.w, a.h) + math.hypot(b.w, b.h))
    return math.hypot(a.cx - b.cx, a.cy - b.cy) < reach


def predict(
    model: Model,
    image: np.ndarray,
    prompts: Sequence[PointPrompt],
    norm: tuple[float, float],
    score_thresh: float = 0.05,
    nms_iou: float = 0.1,
    max_dets: int = 100,
) -> list[Detection]:
    """Detections for one raw (1, S, S) image."""
    with T.no_grad():
        out = model.forward(((np.asarray(image) - norm[0]) / norm[1])[None], [list(prompts)])
    scores = 1.0 / (1.0 + np.exp(-np.clip(out.logits.data[0].ravel(), -700, 700)))
    quads = out.refined_quads.data[0]
    dets = []
    for j in np.flatnonzero(scores > score_thresh):
        try:
            box = corners_to_obb(quads[j].reshape(4, 2))
        except DegenerateGeometryError:
            continue
        dets.append(Detection(quad=obb_to_corners(box), score=float(scores[j])))
    return rotated_nms(dets, nms_iou)[:max_dets]
