"""Differentiable operations on :class:`~conviformer.tensor.Tensor`.

Broadcasting is deliberately narrow: two operands must either have equal
shapes, or the smaller shape must be a trailing suffix of the larger one
(scalars, per-feature vectors, a shared matrix over a leading batch).
Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DimensionError
from .tensor import Tensor, as_tensor, make_result

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DimensionError(f"{op}: shapes {sa} and {sb} are not suffix-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + shape).sum(axis=0)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, k: float) -> Tensor:
    xd = x.data
    return make_result(xd ** k, (x,), lambda g: (g * k * xd ** (k - 1),), "power")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return make_result(out, (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return make_result(np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))
    out = (xd * cdf).astype(xd.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return make_result(out, (x,), backward, "gelu")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise DimensionError("dropout rate must be < 1")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def head_gate_mix(content: Tensor, positional: Tensor, gate_logits: Tensor,
                  gate_override: Optional[float] = None) -> Tensor:
    """Per-head convex blend ``(1 - s) * content + s * positional`` with ``s = sigmoid(logit)``.

    content is (B, H, T, T), positional is (H, T, T) shared across the batch,
    gate_logits is (H,). ``gate_override`` pins ``s`` to a constant for every head.
    """
    H = gate_logits.shape[0]
    if content.ndim != 4 or content.shape[1] != H or positional.shape != content.shape[1:]:
        raise DimensionError(
            f"head_gate_mix: content {content.shape}, positional {positional.shape}, gates {gate_logits.shape}")
    if gate_override is None:
        s = 1.0 / (1.0 + np.exp(-gate_logits.data))
    else:
        s = np.full(H, float(gate_override), dtype=content.dtype)
    s4 = s.reshape(1, H, 1, 1).astype(content.dtype)
    cd, pd = content.data, positional.data
    out = (1.0 - s4) * cd + s4 * pd

    def backward(g):
        gc = g * (1.0 - s4)
        gp = (g * s4).sum(axis=0)
        gl = None
        if gate_override is None and gate_logits.requires_grad:
            ds = (g * (pd - cd)).sum(axis=(0, 2, 3))
            gl = (ds * s * (1.0 - s)).astype(gate_logits.dtype)
        return gc, gp, gl

    return make_result(out, (content, positional, gate_logits), backward, "head_gate_mix")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(_norm_axis(a, x.ndim) for a in axes)
    else:
        axes = tuple(range(x.ndim))
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return make_result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[_norm_axis(a, x.ndim)] for a in axes]))
    return mul(sum(x, axis, keepdims), 1.0 / n)


def pnorm(x: Tensor, p: float = 2.0, axis: int = -1) -> Tensor:
    """``(sum |x_i|^p)^(1/p)`` along ``axis``; the gradient at the origin is taken as 0."""
    axis = _norm_axis(axis, x.ndim)
    xd = x.data
    ax = np.abs(xd)
    if p == 2.0:
        n = np.sqrt((xd * xd).sum(axis=axis))
    else:
        n = (ax ** p).sum(axis=axis) ** (1.0 / p)

    def backward(g):
        nk = np.expand_dims(n, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            if p == 2.0:
                d = xd / nk
            else:
                d = np.sign(xd) * ax ** (p - 1) / nk ** (p - 1)
        d = np.where(nk > 0, d, 0.0)
        return ((np.expand_dims(g, axis) * d).astype(xd.dtype),)

    return make_result(np.asarray(n), (x,), backward, "pnorm")


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_norm_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    axis = _norm_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(str(exc)) from exc
    basic = _is_basic_index(index)

    def backward(g):
        dx = np.zeros(shape, dtype=dtype)
        if basic:
            dx[index] += g
        else:
            np.add.at(dx, index, g)
        return (dx,)

    return make_result(np.array(out, dtype=dtype), (x,), backward, "getitem")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of a (V, D) table selected by integer ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding_lookup needs a 2-d table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"ids out of range for table with {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        dt = np.zeros(shape, dtype=dtype)
        np.add.at(dt, ids, g)
        return (dt,)

    return make_result(table.data[ids], (table,), backward, "embedding_lookup")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes must match, or ``b`` may be a single 2-d matrix shared by every
    leading index of ``a``.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if shared:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in_features, out_features)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalise over one axis, then apply a per-feature affine map along it."""
    axis = _norm_axis(axis, x.ndim)
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias must be ({n},), got {gain.shape}, {bias.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gd = gain.data.reshape(bshape)
    bd = bias.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axis, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True))
        dg = (g * xhat).sum(axis=other)
        db = g.sum(axis=other)
        return dx.astype(x.dtype), dg.astype(gain.dtype), db.astype(bias.dtype)

    return make_result(xhat * gd + bd, (x, gain, bias), backward, "layer_norm")


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int = 1, eps: float = 1e-6) -> Tensor:
    """Normalise each sample over (channels in a group, H, W); per-channel affine.

    ``groups=1`` normalises over the whole (C, H, W) volume, which keeps
    relative contrast between pixels intact, unlike a per-pixel channel norm.
    """
    if x.ndim != 4:
        raise DimensionError(f"group_norm expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if C % groups:
        raise DimensionError(f"group_norm: {C} channels do not split into {groups} groups")
    if gain.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"group_norm: gain/bias must be ({C},), got {gain.shape}, {bias.shape}")
    gd = gain.data.reshape(1, C, 1, 1)
    xg = x.data.reshape(B, groups, -1)
    n = xg.shape[-1]
    xc = xg - xg.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat_g = xc * inv
    xhat = xhat_g.reshape(x.shape)

    def backward(g):
        dxhat = (g * gd).reshape(B, groups, -1)
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat_g * (dxhat * xhat_g).sum(axis=-1, keepdims=True))
        dg = (g * xhat).sum(axis=(0, 2, 3))
        db = g.sum(axis=(0, 2, 3))
        return dx.reshape(x.shape).astype(x.dtype), dg.astype(gain.dtype), db.astype(bias.dtype)

    out = xhat * gd + bias.data.reshape(1, C, 1, 1)
    return make_result(out, (x, gain, bias), backward, "group_norm")


# ---------------------------------------------------------------- spatial


def _pad_hw(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input and OIHW weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input and weight, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input {H + 2 * padding}x{W + 2 * padding}")
    if b is not None and b.shape != (O,):
        raise DimensionError(f"conv2d bias must be ({O},), got {b.shape}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = _pad_hw(x.data, padding)
    # (B, C, Ho, Wo, kh, kw) view, then contract (C, kh, kw) against the weight
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wd = w.data.reshape(O, C * kh * kw)
    out = cols @ wd.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        gw = gb = gx = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(O, C, kh, kw).astype(w.dtype)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0).astype(b.dtype)
        if x.requires_grad:
            dcols = (g2 @ wd).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_result(out, inputs, backward, "conv2d")


def max_pool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or k
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d needs NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    if k > H or k > W:
        raise DimensionError(f"max_pool2d window {k} exceeds input {H}x{W}")
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                hit = (arg == i * k + j)
                dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g * hit
        return (dx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")
