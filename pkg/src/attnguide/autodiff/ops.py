"""Differentiable operations.

Shapes are explicit: binary elementwise ops accept equal shapes, or a scalar
(Python number or 0-d tensor) on either side. Nothing else broadcasts.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ParameterError, ShapeError
from .tensor import Tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _binary_operands(a, b, opname: str) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    a = _as_tensor(a, like)
    b = _as_tensor(b, like)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")
    return a, b


def _fit(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back onto a scalar operand when it was broadcast."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _fit(g, a.shape), _fit(g, b.shape)

    return make_result("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return _fit(g, a.shape), _fit(-g, b.shape)

    return make_result("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        ga = _fit(g * b.data, a.shape) if a.requires_grad else None
        gb = _fit(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _fit(g / b.data, a.shape) if a.requires_grad else None
        gb = _fit(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("div", out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant Python scalar."""
    c = float(c)
    return make_result("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    d2 = d * d
    th = np.tanh(d * (_SQRT_2_OVER_PI + _SQRT_2_OVER_PI * 0.044715 * d2))
    out = 0.5 * d * (1.0 + th)

    def bw(g):
        dinner = _SQRT_2_OVER_PI + (3 * _SQRT_2_OVER_PI * 0.044715) * d2
        dy = 0.5 * (1.0 + th) + 0.5 * d * (1.0 - th * th) * dinner
        return (g * dy,)

    return make_result("gelu", out, (x,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dims, got shape {x.shape}")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return make_result("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    axis = axis if axis >= 0 else x.ndim + 1 + axis
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return make_result("expand", out, (x,), lambda g: (g.sum(axis=axis),))


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]
    if isinstance(out, np.ndarray) and np.shares_memory(out, x.data):
        out = out.copy()

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return make_result("getitem", np.asarray(out), (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ParameterError("stack needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes {shape} and {t.shape} differ")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result("stack", out, tensors, bw)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(x: Tensor) -> Tensor:
    """Maximum element; the gradient goes to the first (lowest flat index) argmax."""
    if x.size == 0:
        raise ParameterError("reduce_max of an empty tensor")
    flat = x.data.reshape(-1)
    idx = int(np.argmax(flat))
    out = flat[idx].copy()

    def bw(g):
        gx = np.zeros(x.size, dtype=x.dtype)
        gx[idx] = g
        return (gx.reshape(x.shape),)

    return make_result("reduce_max", np.asarray(out), (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` applied to the last axis of ``x``; w is (in, out), b is (out,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        bshape = None if b is None else b.shape
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {bshape} are incompatible")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = _col_sum(g2) if b.requires_grad else None
        return gx, gw, gb

    return make_result("linear", out, inputs, bw)


# ---------------------------------------------------------------- nn pieces

def _row_sum(a: np.ndarray) -> np.ndarray:
    # einsum is markedly faster than ndarray.sum for short trailing axes
    return np.einsum("...i->...", a)[..., None]


def _col_sum(a2: np.ndarray) -> np.ndarray:
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature``."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    inv_t = x.dtype.type(1.0 / temperature)
    y = np.subtract(x.data, x.data.max(axis=-1, keepdims=True))
    y *= inv_t
    np.exp(y, out=y)
    y /= _row_sum(y)

    def bw(g):
        gx = g - _row_sum(g * y)
        gx *= y
        gx *= inv_t
        return (gx,)

    return make_result("softmax_rows", y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    inv_d = x.dtype.type(1.0 / d)
    xc = x.data - _row_sum(x.data) * inv_d
    rstd = 1.0 / np.sqrt(_row_sum(xc * xc) * inv_d + x.dtype.type(eps))
    xhat = xc
    xhat *= rstd
    out = xhat * gamma.data
    out += beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = gh - _row_sum(gh) * inv_d
            gx -= xhat * (_row_sum(gh * xhat) * inv_d)
            gx *= rstd
        if gamma.requires_grad:
            ggamma = _col_sum((g * xhat).reshape(-1, d))
        if beta.requires_grad:
            gbeta = _col_sum(g.reshape(-1, d))
        return gx, ggamma, gbeta

    return make_result("layer_norm", out, (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id array."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ParameterError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ParameterError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return make_result("embedding", out, (table,), bw)


def conv2d_fixed(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Correlate the last two axes of ``x`` with a constant odd-sized kernel, wrap padding.

    out[i, j] = sum_ab kernel[a, b] * x[(i + a - c) mod H, (j + b - c) mod W]
    """
    kernel = np.asarray(kernel, dtype=x.dtype)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ParameterError(f"kernel must be 2-D with odd sides, got shape {kernel.shape}")
    if x.ndim < 2:
        raise ShapeError(f"conv2d_fixed needs at least 2 dims, got shape {x.shape}")
    ch, cw = kernel.shape[0] // 2, kernel.shape[1] // 2
    taps = [(kernel[a, b], ch - a, cw - b) for a in range(kernel.shape[0]) for b in range(kernel.shape[1])]

    def corr(arr, sign):
        acc = np.zeros_like(arr)
        for k, sa, sb in taps:
            if k != 0:
                acc += k * np.roll(arr, (sign * sa, sign * sb), axis=(-2, -1))
        return acc

    out = corr(x.data, 1)
    return make_result("conv2d_fixed", out, (x,), lambda g: (corr(g, -1),))

