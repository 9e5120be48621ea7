"""Synthetic SAR-like scenes with oriented tower signatures.

Scenes are generated from an explicit integer seed through numpy's PCG64 bit
generator, never from global or ambient randomness. A tower is a row of
bright point scatterers along its long axis, a cross-arm of scatterers at its
middle, and a brighter cluster at its near-range base. Aspect ratio grows as
the simulated incidence angle falls. Clutter (bright building rectangles,
ridge lines, loose point-scatterer groups) is painted before speckle, which
is applied last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from p2det.geometry import OrientedBox, obb_iou, obb_to_corners
from p2det.prompt_encoder import PointPrompt

PRNG_ALGORITHM = "numpy.random.PCG64"
REFERENCE_INCIDENCE = (25.0, 50.0)


class PlacementError(RuntimeError):
    pass


class SceneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    size: int = Field(512, ge=16)
    towers_per_scene: tuple[int, int] = (1, 3)
    incidence_deg: tuple[float, float] = REFERENCE_INCIDENCE
    tower_short_edge: tuple[float, float] = (5.0, 8.0)
    aspect_range: tuple[float, float] = (1.5, 4.0)
    clutter_density: float = Field(2.0, ge=0)
    looks: float = Field(4.0, ge=1)
    jitter_radius: float = Field(6.0, ge=0)
    background_mean: float = Field(30.0, gt=0)
    tower_amplitude: tuple[float, float] = (140.0, 230.0)
    norm_mean: float = 45.52
    norm_std: float = Field(28.36, gt=0)
    max_retries: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _ranges(self):
        for name in ("towers_per_scene", "incidence_deg", "tower_short_edge", "aspect_range", "tower_amplitude"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        if self.towers_per_scene[0] < 0:
            raise ValueError("towers_per_scene: counts must be >= 0")
        if self.tower_short_edge[0] <= 0:
            raise ValueError("tower_short_edge: must be > 0")
        if self.aspect_range[0] < 1:
            raise ValueError("aspect_range: must be >= 1")
        return self


@dataclass
class Scene:
    image: np.ndarray  # (1, S, S), nonnegative
    gts: list[OrientedBox]
    prompts: list[PointPrompt]
    seed: int
    incidence: list[float] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.image.shape[-1]


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def add_speckle(clean: np.ndarray, looks: float, rng: np.random.Generator) -> np.ndarray:
    """Multiply by unit-mean Gamma(looks, 1/looks) noise."""
    if looks < 1:
        raise ValueError("looks must be >= 1")
    return clean * rng.gamma(looks, 1.0 / looks, size=clean.shape)


def base_point(gt: OrientedBox) -> tuple[float, float]:
    """Midpoint of the near-range (smaller x) short edge of the box."""
    dx, dy = 0.5 * gt.w * math.cos(gt.theta), 0.5 * gt.w * math.sin(gt.theta)
    a = (gt.cx - dx, gt.cy - dy)
    b = (gt.cx + dx, gt.cy + dy)
    return min(a, b)


def jitter_prompts(gts: Sequence[OrientedBox], jitter_radius: float, rng: np.random.Generator, size: int) -> list[PointPrompt]:
    """One prompt per GT at its base point plus a uniform offset inside a disc."""
    if jitter_radius < 0:
        raise ValueError("jitter_radius must be >= 0")
    out = []
    for gt in gts:
        bx, by = base_point(gt)
        r = jitter_radius * math.sqrt(rng.random())
        phi = 2 * math.pi * rng.random()
        x = min(max(bx + r * math.cos(phi), 0.0), size - 1.0)
        y = min(max(by + r * math.sin(phi), 0.0), size - 1.0)
        out.append(PointPrompt(x, y))
    return out


def _splat(img: np.ndarray, x: float, y: float, amp: float, sigma: float = 0.7) -> None:
    r = int(math.ceil(3 * sigma))
    S = img.shape[0]
    x0, x1 = max(int(math.floor(x)) - r, 0), min(int(math.floor(x)) + r + 2, S)
    y0, y1 = max(int(math.floor(y)) - r, 0), min(int(math.floor(y)) + r + 2, S)
    if x0 >= x1 or y0 >= y1:
        return
    gx = np.exp(-0.5 * ((np.arange(x0, x1) - x) / sigma) ** 2)
    gy = np.exp(-0.5 * ((np.arange(y0, y1) - y) / sigma) ** 2)
    img[y0:y1, x0:x1] += amp * np.outer(gy, gx)


def _box_mask(S: int, box: OrientedBox) -> np.ndarray:
    ys, xs = np.mgrid[0:S, 0:S]
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = xs - box.cx, ys - box.cy
    u, v = dx * c + dy * s, -dx * s + dy * c
    return (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)


def _aspect_for(incidence: float, cfg: SceneConfig, rng: np.random.Generator) -> float:
    lo_inc, hi_inc = REFERENCE_INCIDENCE
    t = min(max((incidence - lo_inc) / (hi_inc - lo_inc), 0.0), 1.0)
    a_lo, a_hi = cfg.aspect_range
    alpha = a_hi - (a_hi - a_lo) * t
    return max(1.05, alpha * rng.uniform(0.92, 1.08))


def _render_tower(img: np.ndarray, box: OrientedBox, cfg: SceneConfig, rng: np.random.Generator) -> None:
    c, s = math.cos(box.theta), math.sin(box.theta)

    def at(u, v):
        return box.cx + u * c - v * s, box.cy + u * s + v * c

    lo, hi = cfg.tower_amplitude
    margin = 0.8
    hu, hv = box.w / 2 - margin, box.h / 2 - margin
    n = int(rng.integers(3, 8))
    for u in np.linspace(-hu, hu, n):
        x, y = at(u + rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2) * hv)
        _splat(img, x, y, rng.uniform(lo, hi))
    # cross-arm spanning the short edge
    uc = rng.uniform(-0.2, 0.2) * hu
    for v in (-hv, 0.0, hv):
        x, y = at(uc, v)
        _splat(img, x, y, rng.uniform(lo, hi))
    # dihedral base cluster at the near-range end
    ub = -hu if at(-box.w / 2, 0) <= at(box.w / 2, 0) else hu
    for _ in range(2):
        x, y = at(ub + rng.uniform(-0.4, 0.4), rng.uniform(-0.5, 0.5) * hv)
        _splat(img, x, y, 1.3 * rng.uniform(lo, hi))


def _render_clutter(img: np.ndarray, cfg: SceneConfig, rng: np.random.Generator, towers: list[OrientedBox]) -> None:
    S = cfg.size
    count = int(rng.poisson(cfg.clutter_density * (S / 64.0) ** 2))
    for _ in range(count):
        kind = rng.integers(0, 3)
        if kind == 0:
            # building: filled bright rectangle with corner reflectors
            w, h = rng.uniform(4, 14), rng.uniform(4, 12)
            cx, cy = rng.uniform(0, S - 1), rng.uniform(0, S - 1)
            box = OrientedBox(cx, cy, w, h, rng.uniform(-math.pi / 2, math.pi / 2))
            if any(obb_iou(OrientedBox(t.cx, t.cy, t.w + 4, t.h + 4, t.theta), box) > 0 for t in towers):
                continue
            img += _box_mask(S, box) * rng.uniform(40, 90)
            for corner in obb_to_corners(box)[rng.permutation(4)[:2]]:
                _splat(img, corner[0], corner[1], rng.uniform(80, 160))
        elif kind == 1:
            # ridge line
            x0, y0 = rng.uniform(0, S - 1, size=2)
            phi = rng.uniform(0, math.pi)
            length = rng.uniform(0.3, 0.9) * S
            amp = rng.uniform(30, 60)
            for t in np.arange(0, length, 0.75):
                x, y = x0 + t * math.cos(phi), y0 + t * math.sin(phi)
                if 0 <= x < S and 0 <= y < S:
                    _splat(img, x, y, amp, sigma=0.6)
        else:
            # loose point scatterers
            cx, cy = rng.uniform(0, S - 1, size=2)
            for _ in range(int(rng.integers(2, 6))):
                _splat(img, cx + rng.normal(0, 3), cy + rng.normal(0, 3), rng.uniform(80, 200))


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    S = cfg.size
    coarse = rng.uniform(0.7, 1.3, size=(5, 5))
    xs = np.linspace(0, 4, S)
    i0 = np.minimum(np.floor(xs).astype(int), 3)
    f = xs - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    field_ = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return cfg.background_mean * field_


def gen_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Deterministic scene for (cfg, seed)."""
    rng = make_rng(seed)
    S = cfg.size
    n_towers = int(rng.integers(cfg.towers_per_scene[0], cfg.towers_per_scene[1] + 1))
    img = _background(cfg, rng)
    towers: list[OrientedBox] = []
    incidences: list[float] = []
    for _ in range(n_towers):
        for _attempt in range(cfg.max_retries):
            inc = rng.uniform(*cfg.incidence_deg)
            h = rng.uniform(*cfg.tower_short_edge)
            w = min(h * _aspect_for(inc, cfg, rng), 0.8 * S)
            theta = rng.uniform(-math.pi / 2, math.pi / 2)
            cx, cy = rng.uniform(0, S - 1, size=2)
            box = OrientedBox(cx, cy, max(w, h * 1.0001), h, theta)
            corners = obb_to_corners(box)
            if corners.min() < 0.5 or corners.max() > S - 1.5:
                continue
            if any(obb_iou(OrientedBox(t.cx, t.cy, t.w + 6, t.h + 6, t.theta), box) > 0 for t in towers):
                continue
            towers.append(box)
            incidences.append(inc)
            break
        else:
            raise PlacementError(f"could not place tower {len(towers) + 1} of {n_towers} after {cfg.max_retries} tries")
    clutter = np.zeros((S, S))
    _render_clutter(clutter, cfg, rng, towers)
    signal = np.zeros((S, S))
    for box in towers:
        _render_tower(signal, box, cfg, rng)
    clean = img + clutter + signal
    image = add_speckle(clean, cfg.looks, rng)
    prompts = jitter_prompts(towers, cfg.jitter_radius, rng, S)
    return Scene(image=image[None], gts=towers, prompts=prompts, seed=seed, incidence=incidences)


def normalize_image(image: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    return (image - cfg.norm_mean) / cfg.norm_std
