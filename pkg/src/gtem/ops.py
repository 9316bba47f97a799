"""Differentiable operations over :class:`~gtem.tensor.Tensor`.

Elementwise binary ops require identical shapes. The only broadcasting is the
explicit per-axis family (``add_bias``, ``scale_channels``,
``expand_channels``) so every shape in the networks is spelled out.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .tensor import ShapeError, Tensor, make_result

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ----------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_all(xs: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors as one node."""
    xs = list(xs)
    if not xs:
        raise ValueError("add_all needs at least one tensor")
    for x in xs[1:]:
        _same_shape(xs[0], x, "add_all")
    data = xs[0].data.copy()
    for x in xs[1:]:
        data += x.data
    return make_result(data, xs, lambda g: (g,) * len(xs), "add_all")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array of the same shape (noise, masks)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"add_const: shape mismatch {a.shape} vs {c.shape}")
    return make_result(a.data + c, (a,), lambda g: (g,), "add_const")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def log2(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log2(x), (a,), lambda g: (g / (x * np.log(2.0)),), "log2")


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = a.data
    return make_result(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return make_result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = expit(x)
    return make_result(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return make_result(
        x * cdf, (a,), lambda g: (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),), "gelu"
    )


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    return make_result(y, (a,), lambda g: (g * expit(x),), "softplus")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return make_result(np.clip(x, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def lower_bound(a: Tensor, bound: float) -> Tensor:
    """max(a, bound); gradient passes where a >= bound or where it pushes a up."""
    x = a.data

    def bw(g):
        return (g * ((x >= bound) | (g < 0)),)

    return make_result(np.maximum(x, bound), (a,), bw, "lower_bound")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def round_ste(a: Tensor) -> Tensor:
    """Rounding (ties away from zero) with the identity straight-through gradient."""
    return make_result(round_half_away(a.data), (a,), lambda g: (g,), "round_ste")


# ----------------------------------------------------------------------------
# reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return make_result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_result(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def norm2(a: Tensor) -> Tensor:
    """Euclidean norm of all elements; the subgradient at 0 is taken as 0."""
    value = float(np.sqrt(np.sum(a.data * a.data)))

    def bw(g):
        if value == 0.0:
            return (np.zeros(a.shape),)
        return (a.data * (float(g) / value),)

    return make_result(np.array(value), (a,), bw, "norm2")


# ----------------------------------------------------------------------------
# per-axis broadcasting


def _bshape(ndim: int, axis: int, n: int) -> tuple:
    s = [1] * ndim
    s[axis] = n
    return tuple(s)


def _reduce_except(g: np.ndarray, axis: int) -> np.ndarray:
    axes = tuple(i for i in range(g.ndim) if i != axis)
    return g.sum(axis=axes)


def add_bias(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    axis = _axis(axis, x.ndim)
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {b.shape} vs axis {axis} of {x.shape}")
    bs = b.data.reshape(_bshape(x.ndim, axis, b.shape[0]))
    return make_result(x.data + bs, (x, b), lambda g: (g, _reduce_except(g, axis)), "add_bias")


def scale_channels(x: Tensor, s: Tensor, axis: int = 1) -> Tensor:
    axis = _axis(axis, x.ndim)
    if s.ndim != 1 or s.shape[0] != x.shape[axis]:
        raise ShapeError(f"scale_channels: scale {s.shape} vs axis {axis} of {x.shape}")
    ss = s.data.reshape(_bshape(x.ndim, axis, s.shape[0]))
    xd = x.data
    return make_result(
        xd * ss, (x, s), lambda g: (g * ss, _reduce_except(g * xd, axis)), "scale_channels"
    )


def expand_channels(v: Tensor, shape: Sequence[int], axis: int = 1) -> Tensor:
    """Broadcast a 1-D per-channel vector to ``shape`` along ``axis``."""
    shape = tuple(shape)
    axis = _axis(axis, len(shape))
    if v.ndim != 1 or v.shape[0] != shape[axis]:
        raise ShapeError(f"expand_channels: {v.shape} vs axis {axis} of {shape}")
    out = np.broadcast_to(v.data.reshape(_bshape(len(shape), axis, v.shape[0])), shape).copy()
    return make_result(out, (v,), lambda g: (_reduce_except(g, axis),), "expand_channels")


# ----------------------------------------------------------------------------
# structural


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: invalid axes {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "permute",
    )


def flip(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(_axis(a, x.ndim) for a in axes)
    return make_result(
        np.ascontiguousarray(np.flip(x.data, axes)),
        (x,),
        lambda g: (np.ascontiguousarray(np.flip(g, axes)),),
        "flip",
    )


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    axis = _axis(axis, x.ndim)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return make_result(x.data[idx].copy(), (x,), bw, "take")


def split_channels(x: Tensor, n: int, axis: int = 1) -> list:
    axis = _axis(axis, x.ndim)
    c = x.shape[axis]
    if n < 1 or c % n:
        raise ShapeError(f"split_channels: {c} channels not divisible by {n}")
    w = c // n
    return [take(x, axis, i * w, (i + 1) * w) for i in range(n)]


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    axis = _axis(axis, xs[0].ndim)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i in range(len(xs)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(out)

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the last two axes at the bottom/right."""
    if bottom == 0 and right == 0:
        return x
    h, w = x.shape[-2:]
    width = [(0, 0)] * (x.ndim - 2) + [(0, bottom), (0, right)]
    return make_result(
        np.pad(x.data, width), (x,), lambda g: (np.ascontiguousarray(g[..., :h, :w]),), "pad2d"
    )


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` window of the last two axes."""
    if x.shape[-2:] == (h, w):
        return x
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., :h, :w] = g
        return (full,)

    return make_result(x.data[..., :h, :w].copy(), (x,), bw, "crop2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return make_result(
        out,
        (x,),
        lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),),
        "upsample_nearest",
    )


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (equal batch shapes)."""
    ad, bd = a.data, b.data
    if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return make_result(
        ad @ bd,
        (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
        "matmul",
    )


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, axis: int = -1) -> Tensor:
    """Affine map ``x @ w + b`` over ``axis`` (last by default); ``w`` is (in, out)."""
    axis = _axis(axis, x.ndim)
    if w.ndim != 2 or x.shape[axis] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[axis]} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    last = axis == x.ndim - 1
    xm = xd if last else np.moveaxis(xd, axis, -1)
    y = xm @ wd
    if b is not None:
        y = y + b.data
    out = y if last else np.moveaxis(y, -1, axis)

    def bw(g):
        gm = g if last else np.moveaxis(g, axis, -1)
        gx = None
        if x.requires_grad:
            gx = gm @ wd.T
            if not last:
                gx = np.ascontiguousarray(np.moveaxis(gx, -1, axis))
        g2 = gm.reshape(-1, gm.shape[-1])
        gw = xm.reshape(-1, xm.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(np.ascontiguousarray(out), parents, bw, "linear")


def _window_slices(k: int, stride: int, n_out: int):
    return [slice(i, i + stride * (n_out - 1) + 1, stride) for i in range(k)]


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0, depthwise: bool = False) -> Tensor:
    """2-D cross-correlation with zero padding over ``(N, C, H, W)`` inputs.

    Dense kernels are ``(O, C, kh, kw)``; depthwise kernels are ``(C, 1, kh, kw)``.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and kernel, got {x.shape}, {k.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd-sized, got {kh}x{kw}")
    if depthwise:
        if o != c or ck != 1:
            raise ShapeError(f"conv2d: depthwise kernel {k.shape} for {c} channels")
    elif ck != c:
        raise ShapeError(f"conv2d: kernel expects {ck} channels, input has {c}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    kd = k.data
    rows = _window_slices(kh, stride, ho)
    cols_ = _window_slices(kw, stride, wo)

    if depthwise:
        y = np.zeros((n, c, ho, wo))
        for i in range(kh):
            for j in range(kw):
                y += xp[:, :, rows[i], cols_[j]] * kd[:, 0, i, j][None, :, None, None]

        def bw(g):
            need_x = x.requires_grad
            gxp = np.zeros_like(xp) if need_x else None
            gk = np.empty_like(kd)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, rows[i], cols_[j]]
                    gk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xs)
                    if need_x:
                        gxp[:, :, rows[i], cols_[j]] += g * kd[:, 0, i, j][None, :, None, None]
            if not need_x:
                return None, gk
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            return np.ascontiguousarray(gx), gk

        return make_result(y, (x, k), bw, "dwconv2d")

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    kmat = kd.reshape(o, c * kh * kw)
    y = np.ascontiguousarray((cols @ kmat.T).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (gm.T @ cols.reshape(-1, c * kh * kw)).reshape(kd.shape)
        if not x.requires_grad:
            return None, gk
        gcols = (gm @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, rows[i], cols_[j]] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return np.ascontiguousarray(gx), gk

    return make_result(y, (x, k), bw, "conv2d")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6, axis: int = 1) -> Tensor:
    """Normalize over ``axis`` (the channel axis) and apply per-channel affine."""
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    axis = _axis(axis, x.ndim)
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm: affine {gamma.shape}/{beta.shape} for {c} channels")
    bs = _bshape(x.ndim, axis, c)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    gd = gamma.data.reshape(bs)
    y = xh * gd + beta.data.reshape(bs)

    def bw(g):
        dxh = g * gd
        gx = inv * (
            dxh - dxh.mean(axis=axis, keepdims=True) - xh * (dxh * xh).mean(axis=axis, keepdims=True)
        )
        return gx, _reduce_except(g * xh, axis), _reduce_except(g, axis)

    return make_result(y, (x, gamma, beta), bw, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")
