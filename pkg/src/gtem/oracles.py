"""Slow, independent reference implementations used by tests and the self-test.

Everything here is written from the definitions with explicit loops and the
standard library where practical, sharing no code with the fast paths.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .geom_scan import ScanOrder
from .locality import RING, DiffConvKind
from .tensor import Tensor, backward


def naive_linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Affine map over the last axis, one scalar product at a time. ``w`` is (in, out)."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    n_in, n_out = w.shape
    out = np.zeros((flat.shape[0], n_out))
    for r in range(flat.shape[0]):
        for o in range(n_out):
            acc = 0.0 if b is None else float(b[o])
            for i in range(n_in):
                acc += float(flat[r, i]) * float(w[i, o])
            out[r, o] = acc
    return out.reshape(*lead, n_out)


def naive_conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1, pad: int = 0, depthwise: bool = False) -> np.ndarray:
    """Zero-padded cross-correlation by direct summation. ``x``: (N, C, H, W)."""
    n, c, h, w = x.shape
    c_out, c_k, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            in_ch = [o] if depthwise else range(c)
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci_pos, ci in enumerate(in_ch):
                        kc = 0 if depthwise else ci_pos
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ci, i * stride + u, j * stride + v] * k[o, kc, u, v]
                    out[b, o, i, j] = acc
    return out


def naive_scan(u, delta, A, B, C, D) -> np.ndarray:
    """Element-by-element recurrence h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t."""
    L, E = np.shape(u)
    N = np.shape(A)[1]
    y = np.zeros((L, E))
    for e in range(E):
        h = [0.0] * N
        for t in range(L):
            acc = 0.0
            for s in range(N):
                h[s] = math.exp(delta[t][e] * A[e][s]) * h[s] + delta[t][e] * B[t][s] * u[t][e]
                acc += C[t][s] * h[s]
            y[t, e] = acc + D[e] * u[t][e]
    return y


def scan_order(t: int, h: int, w: int, order: ScanOrder) -> list[tuple[int, int, int]]:
    """Visiting order by enumeration: spatial-first or temporal-first, optionally reversed."""
    if order in (ScanOrder.FST, ScanOrder.BST):
        seq = [(f, r, c) for f in range(t) for r in range(h) for c in range(w)]
    else:
        seq = [(f, r, c) for r in range(h) for c in range(w) for f in range(t)]
    if order in (ScanOrder.BST, ScanOrder.BTS):
        seq.reverse()
    return seq


def _pairs(kind: DiffConvKind) -> list:
    if kind is DiffConvKind.VERTICAL:
        return [((r, c), (r + 1, c)) for r in range(2) for c in range(3)]
    if kind is DiffConvKind.HORIZONTAL:
        return [((r, c), (r, c + 1)) for r in range(3) for c in range(2)]
    if kind is DiffConvKind.ANGULAR:
        return [(RING[i], RING[(i + 1) % 8]) for i in range(8)]
    if kind is DiffConvKind.CENTRAL:
        return [((r, c), (1, 1)) for r in range(3) for c in range(3)]
    raise ValueError(kind)


def pairwise_diff_conv(x: np.ndarray, k: np.ndarray, kind: DiffConvKind) -> np.ndarray:
    """Depthwise difference convolution evaluated as explicit neighbour differences.

    ``x``: (N, C, H, W); ``k``: (C, 1, 3, 3); zero padding of one pixel.
    """
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros((n, c, h, w))
    if kind is DiffConvKind.VANILLA:
        return naive_conv2d(x, k, 1, 1, depthwise=True)
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for (ra, ca), (rb, cb) in _pairs(kind):
                        acc += k[ch, 0, ra, ca] * (xp[b, ch, i + ra, j + ca] - xp[b, ch, i + rb, j + cb])
                    out[b, ch, i, j] = acc
    return out


def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def discretized_gaussian(y: float, mu: float, sigma: float) -> float:
    return normal_cdf((y - mu + 0.5) / sigma) - normal_cdf((y - mu - 0.5) / sigma)


# ----------------------------------------------------------------------------
# gradient checking


def _central_difference(f: Callable[[float], float], eps: float) -> float:
    """Fourth-order central difference of ``f`` at 0."""
    return (8.0 * (f(eps) - f(-eps)) - (f(2 * eps) - f(-2 * eps))) / (12.0 * eps)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], probes: int = 50, eps: float = 1e-5,
              seed: int = 0) -> float:
    """Largest relative error between autodiff and central differences.

    The output is contracted with a fixed random weight to a scalar; each probe
    compares the directional derivative along a random direction against a
    fourth-order central difference.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    out = fn(*leaves)
    weight = rng.standard_normal(out.shape)

    def scalar(arrays) -> float:
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weight))

    from . import ops

    loss = ops.sum(ops.mul(out, Tensor(weight)))
    backward(loss)
    grads = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]
    worst = 0.0
    for _ in range(probes):
        dirs = [rng.standard_normal(a.shape) for a in inputs]
        numeric = _central_difference(lambda h: scalar([a + h * d for a, d in zip(inputs, dirs)]), eps)
        analytic = float(sum(np.sum(g * d) for g, d in zip(grads, dirs)))
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def module_gradcheck(module, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], probes: int = 50,
                     eps: float = 1e-5, seed: int = 0) -> float:
    """Like :func:`gradcheck`, but each probe also perturbs every trainable parameter of ``module``."""
    from . import ops

    rng = np.random.default_rng(seed)
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    params = module.trainable_parameters()
    base = [p.data.copy() for p in params]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    module.zero_grad()
    out = fn(*leaves)
    weight = rng.standard_normal(out.shape)
    backward(ops.sum(ops.mul(out, Tensor(weight))))
    grads = [lf.grad for lf in leaves] + [p.grad for p in params]
    grads = [np.zeros_like(a) if g is None else g for g, a in zip(grads, inputs + base)]
    module.zero_grad()

    def scalar(arrays, param_arrays) -> float:
        for p, a in zip(params, param_arrays):
            p.data = a
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weight))

    worst = 0.0
    try:
        for _ in range(probes):
            dirs = [rng.standard_normal(a.shape) for a in inputs + base]
            d_in, d_par = dirs[:len(inputs)], dirs[len(inputs):]
            numeric = _central_difference(
                lambda h: scalar([a + h * d for a, d in zip(inputs, d_in)], [a + h * d for a, d in zip(base, d_par)]),
                eps,
            )
            analytic = float(sum(np.sum(g * d) for g, d in zip(grads, dirs)))
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6))
    finally:
        for p, a in zip(params, base):
            p.data = a
    return worst


# ----------------------------------------------------------------------------
# MS-SSIM, one window position at a time

_MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _window(size: int, sigma: float = 1.5) -> list:
    c = (size - 1) / 2.0
    g = [math.exp(-((i - c) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    return [[a * b for b in g] for a in g]


def _scale_stats(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    c1, c2 = 0.01**2, 0.03**2
    ch, h, w = a.shape
    size = min(11, h, w)
    win = _window(size)
    ssim_sum = cs_sum = 0.0
    count = 0
    for c in range(ch):
        for i in range(h - size + 1):
            for j in range(w - size + 1):
                ma = mb = saa = sbb = sab = 0.0
                for u in range(size):
                    for v in range(size):
                        wt = win[u][v]
                        pa = a[c, i + u, j + v]
                        pb = b[c, i + u, j + v]
                        ma += wt * pa
                        mb += wt * pb
                        saa += wt * pa * pa
                        sbb += wt * pb * pb
                        sab += wt * pa * pb
                va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
                cs = (2 * cov + c2) / (va + vb + c2)
                ssim_sum += (2 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs
                cs_sum += cs
                count += 1
    return ssim_sum / count, cs_sum / count


def ms_ssim_reference(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    value = 1.0
    for level, wt in enumerate(_MS_WEIGHTS):
        ss, cs = _scale_stats(a, b)
        value *= max(ss if level == len(_MS_WEIGHTS) - 1 else cs, 0.0) ** wt
        h, w = a.shape[1] // 2 * 2, a.shape[2] // 2 * 2
        a = (a[:, 0:h:2, 0:w:2] + a[:, 1:h:2, 0:w:2] + a[:, 0:h:2, 1:w:2] + a[:, 1:h:2, 1:w:2]) / 4
        b = (b[:, 0:h:2, 0:w:2] + b[:, 1:h:2, 0:w:2] + b[:, 0:h:2, 1:w:2] + b[:, 1:h:2, 1:w:2]) / 4
    return value
