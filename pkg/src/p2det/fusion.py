"""Image encoder and two-way token/image cross-attention fusion.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names so
the checkpoint writer can serialize them without extra bookkeeping. All
functions accept an optional leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from p2det import tensor as T
from p2det.prompt_encoder import FourierMap, grid_positional_encoding
from p2det.tensor import Tensor

Params = dict[str, Tensor]


@dataclass
class ImageEmbedding:
    grid: Tensor  # (..., d, gh, gw)
    positional_encoding: Tensor  # (d, gh, gw), constant
    patch: int

    @property
    def hw(self) -> tuple[int, int]:
        return self.grid.shape[-2], self.grid.shape[-1]


# -- parameter initialisation ---------------------------------------------------
def _normal(rng, shape, std) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_attention(rng: np.random.Generator, d: int, prefix: str) -> Params:
    std = 1.0 / math.sqrt(d)
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.w{name}"] = _normal(rng, (d, d), std)
        p[f"{prefix}.b{name}"] = _zeros(d)
    return p


def init_layernorm(d: int, prefix: str) -> Params:
    return {f"{prefix}.g": _ones(d), f"{prefix}.b": _zeros(d)}


def init_mlp(rng: np.random.Generator, d: int, hidden: int, prefix: str) -> Params:
    return {
        f"{prefix}.w1": _normal(rng, (d, hidden), 1.0 / math.sqrt(d)),
        f"{prefix}.b1": _zeros(hidden),
        f"{prefix}.w2": _normal(rng, (hidden, d), 1.0 / math.sqrt(hidden)),
        f"{prefix}.b2": _zeros(d),
    }


def init_image_encoder(rng: np.random.Generator, d: int, patch: int, depth: int, prefix: str = "encoder") -> Params:
    p = {
        f"{prefix}.patch.w": _normal(rng, (d, 1, patch, patch), 1.0 / patch),
        f"{prefix}.patch.b": _zeros(d),
    }
    for i in range(depth):
        lp = f"{prefix}.layer{i}"
        p.update(init_layernorm(d, f"{lp}.norm1"))
        p.update(init_attention(rng, d, f"{lp}.attn"))
        p.update(init_layernorm(d, f"{lp}.norm2"))
        p.update(init_mlp(rng, d, 2 * d, f"{lp}.mlp"))
    p[f"{prefix}.neck.w"] = _normal(rng, (d, d), 1.0 / math.sqrt(d))
    p[f"{prefix}.neck.b"] = _zeros(d)
    return p


def init_two_way_block(rng: np.random.Generator, d: int, prefix: str, block_conv: bool = True) -> Params:
    p: Params = {}
    p.update(init_layernorm(d, f"{prefix}.norm1"))
    p.update(init_attention(rng, d, f"{prefix}.self_attn"))
    p.update(init_layernorm(d, f"{prefix}.norm2"))
    p.update(init_layernorm(d, f"{prefix}.norm2_img"))
    p.update(init_attention(rng, d, f"{prefix}.t2i"))
    p.update(init_layernorm(d, f"{prefix}.norm3"))
    p.update(init_mlp(rng, d, 2 * d, f"{prefix}.mlp"))
    p.update(init_layernorm(d, f"{prefix}.norm4"))
    p.update(init_layernorm(d, f"{prefix}.norm4_img"))
    p.update(init_attention(rng, d, f"{prefix}.i2t"))
    if block_conv:
        p[f"{prefix}.conv.w"] = _normal(rng, (d, 1, 3, 3), 1.0 / 3.0)
        p[f"{prefix}.conv.b"] = _zeros(d)
    return p


# -- building blocks -------------------------------------------------------------
def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    """Softmax(Q K^T / sqrt(d_head)) V over the last two axes."""
    d_head = Q.shape[-1]
    scores = T.matmul(Q, T.transpose(K, _swap_last(K.ndim))) * (1.0 / math.sqrt(d_head))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, V)
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = T.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return T.reshape(x, (*lead, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, params: Params, prefix: str, heads: int, return_weights: bool = False):
    """Multi-head attention with input and output projections.

    q is (..., n, d); k and v are (..., m, d). ``d`` must split evenly into
    ``heads`` heads. With ``return_weights`` the per-head softmax weights
    (..., heads, n, m) are returned as well.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ValueError(f"attention widths differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if d % heads:
        raise ValueError(f"width {d} is not divisible by {heads} heads")
    Q = _split_heads(T.linear(q, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), heads)
    K = _split_heads(T.linear(k, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), heads)
    V = _split_heads(T.linear(v, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), heads)
    out, weights = scaled_dot_attention(Q, K, V, return_weights=True)
    out = T.linear(_merge_heads(out), params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return (out, weights) if return_weights else out


def _ln(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.layernorm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.mlp(x, [(params[f"{prefix}.w1"], params[f"{prefix}.b1"]), (params[f"{prefix}.w2"], params[f"{prefix}.b2"])])


# -- image encoder ---------------------------------------------------------------
def encode_image(img: Tensor, params: Params, fm: FourierMap, patch: int, depth: int, heads: int, prefix: str = "encoder") -> ImageEmbedding:
    """Patch embedding, Fourier positional embedding, transformer layers, linear neck.

    ``img`` is (1, H, W) or (B, 1, H, W); H and W must be multiples of ``patch``.
    """
    H, W = img.shape[-2:]
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    d = fm.dim
    x = T.conv2d(img, params[f"{prefix}.patch.w"], params[f"{prefix}.patch.b"], stride=patch)
    lead = x.shape[:-3]
    x = T.transpose(T.reshape(x, (*lead, d, gh * gw)), _swap_last(x.ndim - 1))
    pe = grid_positional_encoding(fm, gh, gw)
    x = x + Tensor(pe)
    for i in range(depth):
        lp = f"{prefix}.layer{i}"
        xn = _ln(x, params, f"{lp}.norm1")
        x = x + attention(xn, xn, xn, params, f"{lp}.attn", heads)
        x = x + _mlp(_ln(x, params, f"{lp}.norm2"), params, f"{lp}.mlp")
    x = T.linear(x, params[f"{prefix}.neck.w"], params[f"{prefix}.neck.b"])
    grid = T.reshape(T.transpose(x, _swap_last(x.ndim)), (*lead, d, gh, gw))
    pe_grid = Tensor(pe.T.reshape(d, gh, gw))
    return ImageEmbedding(grid=grid, positional_encoding=pe_grid, patch=patch)


# -- two-way fusion ----------------------------------------------------------------
def two_way_block(
    tokens: Tensor,
    image: Tensor,
    pe_q: Tensor,
    pe_k: Tensor,
    params: Params,
    prefix: str,
    heads: int,
    grid_hw: tuple[int, int] | None = None,
    pe_in_values: bool = False,
    block_conv: bool = True,
) -> tuple[Tensor, Tensor]:
    """One pre-norm two-way block.

    tokens (..., n, d) and image (..., L, d) are updated in turn: token
    self-attention, token-to-image cross-attention, token MLP, image-to-token
    cross-attention, then an optional depthwise 3x3 conv on the image grid.
    Positional encodings are added to queries and keys; values get them only
    when ``pe_in_values`` is set.
    """
    if tokens.shape[-1] != image.shape[-1]:
        raise ValueError(f"token width {tokens.shape[-1]} != image width {image.shape[-1]}")
    qn = _ln(tokens, params, f"{prefix}.norm1")
    qp = qn + pe_q
    tokens = tokens + attention(qp, qp, qp if pe_in_values else qn, params, f"{prefix}.self_attn", heads)

    qn = _ln(tokens, params, f"{prefix}.norm2")
    kn = _ln(image, params, f"{prefix}.norm2_img")
    kp = kn + pe_k
    tokens = tokens + attention(qn + pe_q, kp, kp if pe_in_values else kn, params, f"{prefix}.t2i", heads)

    tokens = tokens + _mlp(_ln(tokens, params, f"{prefix}.norm3"), params, f"{prefix}.mlp")

    qn = _ln(tokens, params, f"{prefix}.norm4")
    kn = _ln(image, params, f"{prefix}.norm4_img")
    qp = qn + pe_q
    image = image + attention(kn + pe_k, qp, qp if pe_in_values else qn, params, f"{prefix}.i2t", heads)

    if block_conv and f"{prefix}.conv.w" in params:
        if grid_hw is None:
            raise ValueError("block_conv needs the image grid shape")
        gh, gw = grid_hw
        d = image.shape[-1]
        lead = image.shape[:-2]
        g = T.reshape(T.transpose(image, _swap_last(image.ndim)), (*lead, d, gh, gw))
        g = T.conv2d(g, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"], pad=1, groups=d)
        image = image + T.transpose(T.reshape(g, (*lead, d, gh * gw)), _swap_last(image.ndim))
    return tokens, image


def fuse(
    sparse: Tensor,
    image: ImageEmbedding,
    params: Params,
    depth: int,
    heads: int,
    out_hw: tuple[int, int],
    pe_in_values: bool = False,
    block_conv: bool = True,
    prefix: str = "fusion",
) -> Tensor:
    """Run ``depth`` two-way blocks and upsample the image stream to ``out_hw``.

    Returns a (..., d, H, W) feature map.
    """
    d, gh, gw = image.grid.shape[-3:]
    if sparse.shape[-1] != d:
        raise ValueError(f"prompt width {sparse.shape[-1]} != image width {d}")
    lead = image.grid.shape[:-3]
    k = T.transpose(T.reshape(image.grid, (*lead, d, gh * gw)), _swap_last(len(lead) + 2))
    pe_k = Tensor(image.positional_encoding.data.reshape(d, gh * gw).T)
    q = sparse
    for i in range(depth):
        q, k = two_way_block(
            q, k, sparse, pe_k, params, f"{prefix}.block{i}", heads,
            grid_hw=(gh, gw), pe_in_values=pe_in_values, block_conv=block_conv,
        )
    grid = T.reshape(T.transpose(k, _swap_last(k.ndim)), (*lead, d, gh, gw))
    return T.bilinear_upsample(grid, out_hw[0], out_hw[1])
