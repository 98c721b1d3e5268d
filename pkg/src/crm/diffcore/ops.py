"""Differentiable array operations.

Every op returns a new Tensor and registers an exact analytic backward rule.
Binary ops follow numpy broadcasting; the backward pass sums gradients back
down to each operand's shape.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import scipy.sparse
import scipy.special
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import PreconditionError, Tensor, make_result


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise PreconditionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- pointwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_result(out, (x,), lambda g: (g * (out > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = scipy.special.expit(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input is inside [lo, hi]."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return make_result(out, (x,), lambda g: (g * inside,), "clip")


# --------------------------------------------------------------- reductions

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


# ------------------------------------------------------------------- shapes

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()
    return make_result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise PreconditionError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise PreconditionError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tensors, backward, "concat")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)
    else:
        out = out.copy()

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(out, (x,), backward, "getitem")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; repeated indices accumulate in backward."""
    if x.ndim != 2:
        raise PreconditionError(f"gather_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]
    n = x.shape[0]

    def backward(g):
        sel = scipy.sparse.csr_matrix(
            (np.ones(idx.size, dtype=g.dtype), (idx, np.arange(idx.size))),
            shape=(n, idx.size),
        )
        return (np.asarray(sel @ g, dtype=x.dtype),)

    return make_result(out, (x,), backward, "gather_rows")


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise PreconditionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


# BLAS picks kernels by problem shape (and for some shapes by row alignment),
# which changes rounding. Running every product as fixed-size row panels makes
# each row's result independent of how many rows share the call.
_PANEL_ROWS = 4096


def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m = a.shape[0]
    out = np.empty((m, b.shape[1]), dtype=np.result_type(a, b))
    for s in range(0, m, _PANEL_ROWS):
        blk = a[s : s + _PANEL_ROWS]
        if blk.shape[0] < _PANEL_ROWS:
            padded = np.zeros((_PANEL_ROWS, a.shape[1]), dtype=a.dtype)
            padded[: blk.shape[0]] = blk
            out[s:] = (padded @ b)[: blk.shape[0]]
        else:
            out[s : s + _PANEL_ROWS] = blk @ b
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``.

    ``x`` is (..., in) and ``weight`` is (out, in), the usual dense-layer layout.
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise PreconditionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise PreconditionError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = _rowwise_matmul(x2, weight.data.T)
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, weight.shape[0])

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward, "linear")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-D cross-correlation of a C_in x H x W (or N x C_in x H x W) input.

    Output extent per axis is ``floor((H + 2*pad - k) / stride) + 1``. Zero
    padding. Implemented as im2col + one matrix product.
    """
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise PreconditionError(f"conv2d expects C x H x W or N x C x H x W, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise PreconditionError(f"conv2d weight must be C_out x C_in x k x k, got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k % 2 != 1:
        raise PreconditionError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1 or pad < 0:
        raise PreconditionError(f"conv2d needs stride >= 1 and pad >= 0 (got {stride}, {pad})")
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if c != c_in:
        raise PreconditionError(f"conv2d: input has {c} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise PreconditionError(f"conv2d: bias {bias.shape} != ({c_out},)")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise PreconditionError(f"conv2d: input {h}x{w} too small for kernel {k} with pad {pad}")

    # im2col in channels-last order: the innermost copy runs over contiguous channels
    xh = xd.transpose(0, 2, 3, 1)
    xp = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    hs = slice(None, stride * (ho - 1) + 1, stride)
    ws = slice(None, stride * (wo - 1) + 1, stride)
    if k == 1:
        cols = np.ascontiguousarray(xp[:, hs, ws, :]).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, hs, ws]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(c_out, k, k, c).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2)
            if squeeze:
                gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward, "conv2d")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic n_out x n_in interpolation matrix for one axis.

    Half-pixel centers: output index j samples input coordinate
    ``(j + 0.5) * n_in / n_out - 0.5``, clamped to the valid range so the
    border value is replicated.
    """
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the two trailing axes (half-pixel convention)."""
    if out_h < 1 or out_w < 1:
        raise PreconditionError(f"resize_bilinear target must be >= 1x1, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise PreconditionError(f"resize_bilinear needs at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "resize_bilinear")
    ry = bilinear_matrix(h, out_h, x.dtype)
    rx = bilinear_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return make_result(out, (x,), backward, "resize_bilinear")
