"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a backward rule on the output tensor.
``Tensor.backward`` topologically orders the recorded graph and visits each
node exactly once in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EXP_CLAMP = 700.0
LOG_FLOOR = 1e-30

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make numpy defer to our reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = self.graph()
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def graph(self) -> list[Tensor]:
        """Recorded nodes reachable from this tensor, in topological order."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap a value computed outside the engine with a hand-written backward.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    return _record(np.asarray(data, dtype=np.float64), parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _record(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    clipped = np.minimum(a.data, EXP_CLAMP)
    out = np.exp(clipped)
    return _record(out, (a,), lambda g: (g * out * (a.data <= EXP_CLAMP),))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    safe = np.maximum(a.data, LOG_FLOOR)
    return _record(np.log(safe), (a,), lambda g: (g / safe * (a.data >= LOG_FLOOR),))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / np.maximum(out, LOG_FLOOR),))


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, which keeps gradient checks clean)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), backward)


# -- reductions and shape ops ----------------------------------------------
def _expand_grad(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return _record(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_grad(g, a.shape, axis, keepdims).copy(),),
    )


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size / max(np.mean(a.data, axis=axis, keepdims=keepdims).size, 1)
    return _record(
        np.mean(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_grad(g, a.shape, axis, keepdims) / n,),
    )


def tmin(a: Tensor, axis: int) -> Tensor:
    """Minimum along one axis; the gradient goes to the first arg-min."""
    a = as_tensor(a)
    idx = np.argmin(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _record(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# -- linear algebra --------------------------------------------------------
def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product accumulated term by term along the inner axis.

    Each output entry is ``((a0*b0 + a1*b1) + a2*b2) + ...`` in index order,
    so results are bit-identical to a plain triple loop, unlike BLAS, which
    reorders and fuses the sums.
    """
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(shape)
    for t in range(a.shape[-1]):
        out += a[..., :, t, None] * b[..., None, t, :]
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules on leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(_ordered_matmul(a.data, b.data), (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    out = _record(xhat, (x,), backward)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight shaped (in, out)."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def mlp(x: Tensor, weights: Sequence[tuple[Tensor, Tensor]], act=gelu) -> Tensor:
    """Stack of linear layers with ``act`` between them (none after the last)."""
    for i, (w, b) in enumerate(weights):
        x = linear(x, w, b)
        if i < len(weights) - 1:
            x = act(x)
    return x


# -- convolution and resampling ----------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation.

    x is (C, H, W) or (N, C, H, W); weight is (O, C // groups, k, k). Dense
    groups go through im2col and one matrix product each; depthwise kernels
    accumulate one tap at a time.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups or cg != c // groups:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}, groups {groups}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")
    og = o // groups
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    wg = weight.data.reshape(groups, og, cg, kh, kw)
    depthwise = cg == 1 and og == 1

    def tap(i, j):
        return (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))

    if depthwise:
        wd = weight.data.reshape(1, o, kh, kw)
        out = np.zeros((n, o, ho, wo))
        for i in range(kh):
            for j in range(kw):
                out += wd[:, :, i, j, None, None] * xp[tap(i, j)]
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # (n, groups, ho*wo, cg*kh*kw)
        cols = np.ascontiguousarray(win.reshape(n, groups, cg, ho, wo, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6))
        cols = cols.reshape(n, groups, ho * wo, cg * kh * kw)
        wmat = wg.reshape(groups, og, cg * kh * kw)
        out = np.matmul(cols, np.swapaxes(wmat, -1, -2))  # (n, groups, P, og)
        out = np.swapaxes(out, -1, -2).reshape(n, o, ho, wo)

    def backward(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        if depthwise:
            gw = np.zeros((o, kh, kw))
            for i in range(kh):
                for j in range(kw):
                    sl = tap(i, j)
                    gw[:, i, j] = np.sum(g4 * xp[sl], axis=(0, 2, 3))
                    gxp[sl] += wd[:, :, i, j, None, None] * g4
            gw = gw.reshape(weight.shape)
        else:
            gp = np.swapaxes(g4.reshape(n, groups, og, ho * wo), -1, -2)  # (n, groups, P, og)
            gw = np.matmul(np.swapaxes(gp, -1, -2), cols).sum(axis=0).reshape(weight.shape)
            gcols = np.matmul(gp, wmat).reshape(n, groups, ho, wo, cg, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gxp[tap(i, j)] += gcols[:, :, :, :, :, i, j].transpose(0, 1, 4, 2, 3).reshape(n, c, ho, wo)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return (gx[0] if squeeze else gx), gw

    res = _record(out[0] if squeeze else out, (x, weight), backward)
    if bias is not None:
        res = res + reshape(bias, (-1, 1, 1))
    return res


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes, half-pixel (align-corners-false) sampling."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h == 0 or w == 0:
        raise ValueError("bilinear_upsample of an empty input")
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}")
    mh = _interp_matrix(h, out_h)
    mw = _interp_matrix(w, out_w)
    out = np.einsum("ih,...hw,jw->...ij", mh, x.data, mw, optimize=True)
    return _record(out, (x,), lambda g: (np.einsum("ih,...ij,jw->...hw", mh, g, mw, optimize=True),))


# -- gradient checking -------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, coords: Sequence[int] | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor. The error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``. ``coords`` restricts the check to a subset
    of flat indices (for large parameter tensors).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x.grad = None
    was = x.requires_grad
    x.requires_grad = True
    try:
        out = f(x)
        if out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        out.backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = was
    flat = x.data.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    x.grad = None
    return worst
