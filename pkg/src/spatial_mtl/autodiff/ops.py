"""Differentiable operations.

Binary elementwise ops require equal shapes; the only implicit broadcast is a
Python scalar or a single-element tensor. Anything else goes through the
explicit :func:`broadcast_to`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ConfigurationError, ShapeError, Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "relu", "sigmoid", "tanh", "elementwise",
    "matmul", "linear", "broadcast_to", "reshape", "transpose", "concat", "take",
    "sum", "mean", "embedding", "layer_norm", "softmax_attention",
    "conv2d", "transposed_conv2d",
]


def _sum_to_scalar(g: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(g.sum(), dtype=like.data.dtype).reshape(like.shape)


def _binary_operands(a, b, kind: str):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype)), True
    if a.shape == b.shape:
        return a, b, False
    if b.size == 1:
        return a, b, True
    if a.size == 1:
        return b, a, True
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def add(a, b) -> Tensor:
    a, b, scalar_b = _binary_operands(a, b, "add")

    def backward(g):
        return g, (_sum_to_scalar(g, b) if scalar_b else g)

    return make_result(a.data + (b.data.reshape(()) if scalar_b else b.data), (a, b), backward)


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, mul(b, -1.0))
    return add(a, -b)


def mul(a, b) -> Tensor:
    a, b, scalar_b = _binary_operands(a, b, "mul")
    bd = b.data.reshape(()) if scalar_b else b.data

    def backward(g):
        ga = g * bd
        gb = g * a.data
        return ga, (_sum_to_scalar(gb, b) if scalar_b else gb)

    return make_result(a.data * bd, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return make_result(np.where(on, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1 - y * y),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return _UNARY[kind](as_tensor(a))
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` applied to the last axis of ``x`` (weights shared across leading axes)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out.reshape(*lead, w.shape[1]), inputs, backward)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    extra = len(shape) - x.data.ndim
    expanded = tuple(i for i, n in enumerate(x.shape) if n == 1 and shape[i + extra] != 1)

    def backward(g):
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        if expanded:
            g = g.sum(axis=expanded, keepdims=True)
        return (g,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, splits, axis=axis)

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def take(x: Tensor, index, axis: int) -> Tensor:
    """Basic (non-fancy) indexing along one axis: an int or a slice."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = index
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return make_result(x.data[sl], (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                       lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make_result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                       lambda g: (np.broadcast_to(g / n, x.shape),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result(table.data[ids], (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = rstd / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                         - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, dgain, dbias

    return make_result(out.astype(x.data.dtype, copy=False), (x, gain, bias), backward)


_MASKED = -1e9


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``(..., tokens, depth)`` operands.

    ``key_mask`` is a boolean array broadcastable to ``(..., tokens_q, tokens_k)``;
    False entries are excluded from every softmax row.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"softmax_attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    d = q.shape[-1]
    if d == 0:
        raise ShapeError("softmax_attention: zero head depth")
    scale = 1.0 / math.sqrt(d)
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if key_mask is not None:
        s = np.where(key_mask, s, _MASKED)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    p = p.astype(q.data.dtype, copy=False)
    out = p @ v.data

    def backward(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        return ds @ k.data, np.swapaxes(ds, -1, -2) @ q.data, dv

    return make_result(out, (q, k, v), backward)


# -- convolutions -------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, padding: int, what: str) -> int:
    span = n + 2 * padding - k
    if stride < 1 or padding < 0 or span < 0 or span % stride:
        raise ConfigurationError(
            f"{what}: input {n}, kernel {k}, stride {stride}, padding {padding} "
            "gives a non-integer output size")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, c: int, hp: int, wp: int, kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def _crop(a: np.ndarray, padding: int) -> np.ndarray:
    return a if padding == 0 else a[:, :, padding:-padding, padding:-padding]


def _pad(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C,H,W or N,C,H,W) with ``kernels`` (O,C,kh,kw)."""
    xb, squeeze = _batched(x)
    o, c, kh, kw = kernels.shape
    n, cx, h, w = xb.shape
    if cx != c:
        raise ShapeError(f"conv2d: input channels {cx} != kernel channels {c}")
    ho = _out_size(h, kh, stride, padding, "conv2d")
    wo = _out_size(w, kw, stride, padding, "conv2d")
    cols = _im2col(_pad(xb, padding), kh, kw, stride, ho, wo)
    wmat = kernels.data.reshape(o, -1)
    out = (wmat @ cols).reshape(n, o, ho, wo)

    def backward(g):
        g = g.reshape(n, o, ho * wo)
        dk = np.einsum("nol,nkl->ok", g, cols).reshape(kernels.shape)
        dcols = wmat.T @ g
        dx = _crop(_col2im(dcols, c, h + 2 * padding, w + 2 * padding, kh, kw, stride, ho, wo), padding)
        return (dx[0] if squeeze else dx), dk

    return make_result(out[0] if squeeze else out, (x, kernels), backward)


def transposed_conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same ``kernels`` (O,C,kh,kw): maps O channels to C."""
    xb, squeeze = _batched(x)
    o, c, kh, kw = kernels.shape
    n, ox, h, w = xb.shape
    if ox != o:
        raise ShapeError(f"transposed_conv2d: input channels {ox} != kernel input channels {o}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"transposed_conv2d: stride {stride}, padding {padding}")
    hout = (h - 1) * stride - 2 * padding + kh
    wout = (w - 1) * stride - 2 * padding + kw
    if hout <= 0 or wout <= 0:
        raise ConfigurationError(f"transposed_conv2d: output size {hout}x{wout} is empty")
    wmat = kernels.data.reshape(o, -1)
    xcols = xb.reshape(n, o, h * w)
    cols = wmat.T @ xcols
    out = _crop(_col2im(cols, c, hout + 2 * padding, wout + 2 * padding, kh, kw, stride, h, w), padding)

    def backward(g):
        gcols = _im2col(_pad(g.reshape(n, c, hout, wout), padding), kh, kw, stride, h, w)
        dx = (wmat @ gcols).reshape(n, o, h, w)
        dk = np.einsum("nol,nkl->ok", xcols, gcols).reshape(kernels.shape)
        return (dx[0] if squeeze else dx), dk

    out = np.ascontiguousarray(out)
    return make_result(out[0] if squeeze else out, (x, kernels), backward)
