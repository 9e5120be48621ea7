"""Sparse prompt encoder: point prompts to fixed-count embedding tokens."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from p2det.tensor import Tensor


class PromptLabel(enum.IntEnum):
    TOWER_BASE = 0
    PADDING = 1


class PromptCapacityError(ValueError):
    pass


@dataclass(frozen=True)
class PointPrompt:
    x: float
    y: float
    label: PromptLabel = PromptLabel.TOWER_BASE


@dataclass
class FourierMap:
    """Frozen Gaussian frequency matrix for random Fourier features.

    ``B`` has shape (m, 2) with entries from N(0, sigma^2) drawn from a PCG64
    stream seeded by ``seed``; ``a`` holds the per-frequency amplitudes.
    """

    m: int
    sigma: float = 1.0
    seed: int = 0
    B: np.ndarray = field(init=False, repr=False)
    a: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 1 or self.sigma <= 0:
            raise ValueError("FourierMap needs m >= 1 and sigma > 0")
        rng = np.random.Generator(np.random.PCG64(self.seed))
        self.B = rng.normal(0.0, self.sigma, size=(self.m, 2))
        self.a = np.ones(self.m)

    @classmethod
    def from_arrays(cls, B, a=None) -> FourierMap:
        B = np.asarray(B, dtype=np.float64).reshape(-1, 2)
        fm = cls(m=len(B))
        fm.B = B
        fm.a = np.ones(len(B)) if a is None else np.asarray(a, dtype=np.float64)
        return fm

    @property
    def dim(self) -> int:
        return 2 * self.m


def normalize_point(p: PointPrompt, image_size: int | tuple[int, int]) -> tuple[float, float]:
    """Map pixel coordinates to [-1, 1]^2 with pixel centers at integers."""
    W, H = (image_size, image_size) if isinstance(image_size, int) else image_size
    if not (-0.5 <= p.x <= W - 0.5 and -0.5 <= p.y <= H - 0.5):
        raise ValueError(f"prompt ({p.x}, {p.y}) outside a {W}x{H} image")
    return 2.0 * (p.x + 0.5) / W - 1.0, 2.0 * (p.y + 0.5) / H - 1.0


def fourier_map(v, fm: FourierMap) -> np.ndarray:
    """Interleaved [a cos(2 pi b.v), a sin(2 pi b.v)] features.

    ``v`` is a single (u, v) pair or an (n, 2) array; the output is (2m,) or (n, 2m).
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    proj = 2.0 * math.pi * (v.reshape(-1, 2) @ fm.B.T)
    out = np.empty((proj.shape[0], 2 * fm.m))
    out[:, 0::2] = fm.a * np.cos(proj)
    out[:, 1::2] = fm.a * np.sin(proj)
    return out[0] if single else out


def grid_positional_encoding(fm: FourierMap, gh: int, gw: int) -> np.ndarray:
    """Fourier features of normalized cell-center coordinates, shape (gh * gw, 2m)."""
    ys, xs = np.meshgrid((np.arange(gh) + 0.5) / gh * 2 - 1, (np.arange(gw) + 0.5) / gw * 2 - 1, indexing="ij")
    return fourier_map(np.stack([xs.ravel(), ys.ravel()], axis=1), fm)


def encode_prompts(
    prompts: Sequence[PointPrompt],
    fm: FourierMap,
    type_embeddings: Tensor,
    num_prompts: int,
    image_size: int | tuple[int, int],
) -> Tensor:
    """Sparse embedding tokens, shape (num_prompts, 2m).

    Each prompt becomes its Fourier features plus the learned embedding of its
    label; unused slots hold the padding embedding alone. The frequency matrix
    gets no gradient.
    """
    if len(prompts) > num_prompts:
        raise PromptCapacityError(f"{len(prompts)} prompts exceed capacity {num_prompts}")
    d = fm.dim
    if type_embeddings.shape != (len(PromptLabel), d):
        raise ValueError(f"type embeddings must be {(len(PromptLabel), d)}, got {type_embeddings.shape}")
    pos = np.zeros((num_prompts, d))
    labels = np.full(num_prompts, int(PromptLabel.PADDING))
    for i, p in enumerate(prompts):
        labels[i] = int(p.label)
        if p.label != PromptLabel.PADDING:
            pos[i] = fourier_map(normalize_point(p, image_size), fm)
    return Tensor(pos) + type_embeddings[labels]


__all__ = [
    "PromptLabel",
    "PointPrompt",
    "FourierMap",
    "PromptCapacityError",
    "normalize_point",
    "fourier_map",
    "grid_positional_encoding",
    "encode_prompts",
]
