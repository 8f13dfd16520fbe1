"""Differentiable tensor ops.

Each op computes its output with numpy and, when taping, registers a
vector-Jacobian product.  Elementwise binary ops accept identical shapes or a
scalar operand only; anything wider goes through :func:`broadcast_to`.
"""
from __future__ import annotations

import math

import numpy as np

from .autograd import make_result
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor.wrap(np.asarray(x, dtype=dtype))


def _pair(a, b, op):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _fit(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (undoes numpy broadcasting)."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return make_result(a.data + b.data, "add", (a, b),
                       lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return make_result(a.data - b.data, "sub", (a, b),
                       lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    return make_result(a.data * b.data, "mul", (a, b),
                       lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return make_result(a.data * c, "scale", (a,), lambda g: (g * c,))


def mul_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``a`` (masks, weights)."""
    arr = np.asarray(arr, dtype=a.dtype)
    out = a.data * arr
    if out.shape != a.shape:
        raise ShapeError(f"mul_const: constant {arr.shape} widens {a.shape}")
    return make_result(out, "mul_const", (a,), lambda g: (g * arr,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)
    return make_result(out, "gelu", (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_result(x * x, "square", (a,), lambda g: (2.0 * g * x,))


# ----------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _fit(ga, a.shape), _fit(gb, b.shape)
    return make_result(out, "matmul", (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out) and ``b`` of shape (out,)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    out = np.matmul(x.data, w.data)
    if b is not None:
        out = out + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, w.data.T)
        gw = np.matmul(x.data.reshape(-1, x.shape[-1]).T, g2)
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb
    return make_result(out, "linear", (x, w, b), vjp)


# ----------------------------------------------------------------------------
# reductions and normalisation

def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)
    out = np.asarray(out, dtype=a.dtype)

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return make_result(out, "reduce_sum", (a,), vjp)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("reduce_mean over an empty axis")
    out = np.asarray(np.sum(a.data, axis=axis) / n, dtype=a.dtype)

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g / n, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)
    return make_result(out, "reduce_mean", (a,), vjp)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of ``x`` (B, l, d) counting only rows where ``mask`` (B, l) is set."""
    m = mask.astype(x.dtype)[..., None]
    count = m.sum(axis=1)
    if np.any(count == 0):
        raise ShapeError("masked_mean: a row has no valid positions")
    out = (x.data * m).sum(axis=1) / count
    return make_result(out, "masked_mean", (x,), lambda g: (g[:, None, :] * m / count[:, None, :],))


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get weight 0."""
    x = a.data if mask is None else np.where(mask, a.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)
    return make_result(s, "softmax", (a,),
                       lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def layernorm_rows(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
                   eps: float = LN_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gh = g * gain.data if gain is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, g.shape[-1])
        gg = (flat * xhat.reshape(-1, g.shape[-1])).sum(axis=0) if gain is not None else None
        gb = flat.sum(axis=0) if bias is not None else None
        return gx, gg, gb
    return make_result(out, "layernorm", (x, gain, bias), vjp)


# ----------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape).copy()
    return make_result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return make_result(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    return make_result(out, "broadcast_to", (a,), lambda g: (_fit(g, a.shape),))


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return make_result(out, "concat", tensors, vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int | None = None) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)
    return make_result(out, "slice", (a,), vjp)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer array of any shape."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError("take_rows: index out of range")
    out = table.data[index]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)
    return make_result(out, "take_rows", (table,), vjp)


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Row ``index[b]`` of each batch item: (B, l, d) -> (B, d)."""
    b = np.arange(x.shape[0])
    out = x.data[b, index]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[b, index] = g
        return (full,)
    return make_result(out, "gather_last", (x,), vjp)


def _window_index(batch: int, n: int, offsets: np.ndarray, width: int, depth: int):
    offsets = np.asarray(offsets)
    if offsets.shape != (batch, n):
        raise ShapeError(f"offsets shape {offsets.shape}, expected {(batch, n)}")
    if offsets.size and (offsets.min() < 0 or offsets.max() + width > depth):
        raise IndexError("channel window out of bounds")
    cols = offsets[..., None] + np.arange(width)
    bi = np.arange(batch)[:, None, None]
    return bi, cols


def gather_windows(x: Tensor, offsets: np.ndarray, width: int) -> Tensor:
    """``out[b, r, :] = x[b, r, offsets[b, r] : offsets[b, r] + width]``."""
    B, n, depth = x.shape
    bi, cols = _window_index(B, n, offsets, width, depth)
    ri = np.arange(n)[None, :, None]
    out = x.data[bi, ri, cols]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[bi, ri, cols] = g
        return (full,)
    return make_result(out, "gather_windows", (x,), vjp)


def scatter_windows(base: Tensor, values: Tensor, rows: np.ndarray, offsets: np.ndarray) -> Tensor:
    """``base`` plus ``values[b, j]`` added at ``[b, rows[b, j], offsets[b, j] : +width]``.

    Overlapping writes accumulate.  ``rows`` may be shared across the batch
    (shape (n,)) or per item (shape (B, n)).
    """
    B, n, width = values.shape
    if base.shape[0] != B:
        raise ShapeError("scatter_windows: batch size mismatch")
    bi, cols = _window_index(B, n, offsets, width, base.shape[-1])
    rows = np.broadcast_to(np.asarray(rows), (B, n))
    if rows.size and (rows.min() < 0 or rows.max() >= base.shape[1]):
        raise IndexError("scatter_windows: row out of range")
    ri = rows[..., None]
    out = base.data.copy()
    np.add.at(out, (bi, ri, cols), values.data)
    return make_result(out, "scatter_windows", (base, values),
                       lambda g: (g, g[bi, ri, cols]))


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel 1-D convolution along axis 1 with 'same' zero padding.

    ``x`` is (B, l, c) and ``w`` is (k, c) with odd ``k``.
    """
    k = w.shape[0]
    if k % 2 != 1 or w.shape[1] != x.shape[-1]:
        raise ShapeError(f"depthwise_conv1d: kernel {w.shape} vs input {x.shape}")
    pad = k // 2
    length = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out = out + xp[:, j:j + length, :] * w.data[j]
    if b is not None:
        out = out + b.data

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gxp[:, j:j + length, :] += g * w.data[j]
            gw[j] = (g * xp[:, j:j + length, :]).sum(axis=(0, 1))
        gb = g.sum(axis=(0, 1)) if b is not None else None
        return gxp[:, pad:pad + length, :], gw, gb
    return make_result(out, "depthwise_conv1d", (x, w, b), vjp)


# ----------------------------------------------------------------------------
# losses (fused for numerical stability)

def rmse_loss(preds: Tensor, labels) -> Tensor:
    """Root mean squared error.  The gradient at an exact fit is taken as 0."""
    y = np.asarray(labels, dtype=preds.dtype)
    if preds.shape != y.shape or preds.size == 0:
        raise ShapeError(f"rmse_loss: preds {preds.shape} vs labels {y.shape}")
    diff = preds.data - y
    n = diff.size
    value = np.sqrt(np.sum(diff * diff) / n)

    def vjp(g):
        if value == 0.0:
            return (np.zeros_like(diff),)
        return (g * diff / (n * value),)
    return make_result(np.asarray(value, dtype=preds.dtype), "rmse_loss", (preds,), vjp)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    y = np.asarray(labels, dtype=logits.dtype)
    if logits.shape != y.shape or logits.size == 0:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs labels {y.shape}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))
    return make_result(np.asarray(per.sum() / n, dtype=logits.dtype), "bce_loss", (logits,),
                       lambda g: (g * (prob - y) / n,))
