"""Reversible layout transforms, the selective scan, GTMB and CMM.

A video feature is laid out ``(T, C, H, W)``. The scan always walks the
transformed tensor in row-major order over its axes 0, 2, 3 (frame, row,
column); the transform decides what those axes mean:

* FST: identity, so frames are visited in order and each frame in raster order.
* BST: all three sequence axes flipped, i.e. the FST sequence reversed.
* FTS: ``(T, C, H, W) -> (H, C, W, T)``, so time varies fastest at each pixel.
* BTS: FTS followed by the flip.
"""
from __future__ import annotations

import enum

import numba
import numpy as np

from . import ops
from .nn import DepthwiseConv2d, LayerNorm, Linear, Module, uniform_fan_in
from .tensor import Parameter, ShapeError, Tensor, make_result

_TRANSPOSE = (2, 1, 3, 0)
_UNTRANSPOSE = (3, 1, 0, 2)
_SEQ_AXES = (0, 2, 3)


class ScanOrder(enum.Enum):
    FST = (False, False)
    BST = (False, True)
    FTS = (True, False)
    BTS = (True, True)

    @property
    def transpose(self) -> bool:
        return self.value[0]

    @property
    def flip(self) -> bool:
        return self.value[1]


CASCADE = (ScanOrder.FST, ScanOrder.BST, ScanOrder.FTS, ScanOrder.BTS)


def apply_transform(x: Tensor, order: ScanOrder) -> Tensor:
    if order.transpose:
        x = ops.permute(x, _TRANSPOSE)
    if order.flip:
        x = ops.flip(x, _SEQ_AXES)
    return x


def inverse_transform(x: Tensor, order: ScanOrder) -> Tensor:
    if order.flip:
        x = ops.flip(x, _SEQ_AXES)
    if order.transpose:
        x = ops.permute(x, _UNTRANSPOSE)
    return x


def transform_array(a: np.ndarray, order: ScanOrder) -> np.ndarray:
    if order.transpose:
        a = a.transpose(_TRANSPOSE)
    if order.flip:
        a = np.flip(a, _SEQ_AXES)
    return np.ascontiguousarray(a)


def scan_sequence(t: int, h: int, w: int, order: ScanOrder) -> list[tuple[int, int, int]]:
    """(frame, row, col) positions in the order the scan visits them."""
    flat = np.arange(t * h * w).reshape(t, 1, h, w)
    moved = transform_array(flat, order)
    return [tuple(int(v) for v in np.unravel_index(i, (t, h, w))) for i in moved.reshape(-1)]


# ----------------------------------------------------------------------------
# selective scan kernels


@numba.njit(cache=True)
def _scan_fwd(u, delta, decay, B, C, D):
    L, E = u.shape
    N = B.shape[1]
    hs = np.empty((L, E, N))
    y = np.empty((L, E))
    h = np.zeros((E, N))
    for t in range(L):
        for e in range(E):
            du = delta[t, e] * u[t, e]
            acc = 0.0
            for n in range(N):
                v = decay[t, e, n] * h[e, n] + du * B[t, n]
                h[e, n] = v
                hs[t, e, n] = v
                acc += C[t, n] * v
            y[t, e] = acc + D[e] * u[t, e]
    return y, hs


@numba.njit(cache=True)
def _scan_bwd(u, delta, decay, A, B, C, D, hs, dy):
    L, E = u.shape
    N = B.shape[1]
    du = np.zeros((L, E))
    ddelta = np.zeros((L, E))
    dA = np.zeros((E, N))
    dB = np.zeros((L, N))
    dC = np.zeros((L, N))
    dD = np.zeros(E)
    dh = np.zeros((E, N))
    for t in range(L - 1, -1, -1):
        for e in range(E):
            dt = delta[t, e]
            ut = u[t, e]
            g = dy[t, e]
            dD[e] += g * ut
            acc_u = g * D[e]
            acc_d = 0.0
            for n in range(N):
                dC[t, n] += g * hs[t, e, n]
                gh = dh[e, n] + g * C[t, n]
                a = decay[t, e, n]
                if t > 0:
                    ga = gh * hs[t - 1, e, n] * a
                    acc_d += ga * A[e, n]
                    dA[e, n] += ga * dt
                acc_d += gh * B[t, n] * ut
                dB[t, n] += gh * dt * ut
                acc_u += gh * dt * B[t, n]
                dh[e, n] = gh * a
            du[t, e] = acc_u
            ddelta[t, e] = acc_d
    return du, ddelta, dA, dB, dC, dD


def _check_scan_shapes(u, delta, A, B, C, D) -> None:
    L, E = u.shape
    N = A.shape[1]
    if L < 1:
        raise ShapeError("selective scan needs a sequence of length >= 1")
    if delta.shape != (L, E) or A.shape != (E, N) or B.shape != (L, N) or C.shape != (L, N) or D.shape != (E,):
        raise ShapeError(
            f"selective scan shapes: u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
        )


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t,  y_t = C_t h_t + D u_t,  h_0 = 0.

    ``u, delta``: (L, E); ``A``: (E, N) with negative entries; ``B, C``: (L, N);
    ``D``: (E,). Compiled loop over the sequence, vectorized over (E, N).
    """
    ud, dd, Ad, Bd, Cd, Dd = (t.data for t in (u, delta, A, B, C, D))
    _check_scan_shapes(ud, dd, Ad, Bd, Cd, Dd)
    decay = np.exp(dd[:, :, None] * Ad[None])
    y, hs = _scan_fwd(ud, dd, decay, Bd, Cd, Dd)

    def bw(g):
        return _scan_bwd(ud, dd, decay, Ad, Bd, Cd, Dd, hs, np.ascontiguousarray(g))

    return make_result(y, (u, delta, A, B, C, D), bw, "selective_scan")


def selective_scan_chunked(u, delta, A, B, C, D, block: int = 16) -> np.ndarray:
    """Blocked closed-form evaluation of the same recurrence (no gradient).

    Within a block the state is ``h_t = e^{S_t} h_0 + sum_{s<=t} e^{S_t - S_s} b_s``
    with ``S`` the running sum of ``delta * A``; the block's last state seeds
    the next block.
    """
    u, delta, A, B, C, D = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, B, C, D))
    _check_scan_shapes(u, delta, A, B, C, D)
    L, E = u.shape
    N = A.shape[1]
    y = np.empty((L, E))
    h0 = np.zeros((E, N))
    tri = None
    for start in range(0, L, block):
        stop = min(start + block, L)
        k = stop - start
        dl = delta[start:stop]
        S = np.cumsum(dl[:, :, None] * A[None], axis=0)  # (k, E, N)
        b = dl[:, :, None] * B[start:stop, None, :] * u[start:stop, :, None]
        if tri is None or tri.shape[0] != k:
            tri = np.tril(np.ones((k, k), dtype=bool))
        diff = S[:, None] - S[None, :]  # (t, s, E, N)
        decay = np.where(tri[:, :, None, None], np.exp(np.minimum(diff, 0.0)), 0.0)
        h = np.exp(S) * h0[None] + np.einsum("tsen,sen->ten", decay, b)
        y[start:stop] = np.einsum("ten,tn->te", h, C[start:stop]) + D[None] * u[start:stop]
        h0 = h[-1]
    return y


# ----------------------------------------------------------------------------
# blocks


class SelectiveSSM(Module):
    """Input-dependent (delta, B, C) projections around :func:`selective_scan`."""

    def __init__(self, rng: np.random.Generator, channels: int, state_dim: int = 16,
                 dt_min: float = 1e-3, dt_max: float = 0.1):
        e, n = channels, state_dim
        self.state_dim = n
        self.A_log = Parameter(np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (e, 1))))
        self.delta_w = Parameter(uniform_fan_in(rng, (e, e), e, gain=0.1))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=e))
        self.delta_b = Parameter(dt + np.log(-np.expm1(-dt)))  # softplus^-1(dt)
        self.B_w = Parameter(uniform_fan_in(rng, (e, n), e))
        self.C_w = Parameter(uniform_fan_in(rng, (e, n), e))
        self.D = Parameter(np.ones(e))

    def __call__(self, seq: Tensor) -> Tensor:
        delta = ops.softplus(ops.linear(seq, self.delta_w, self.delta_b))
        A = ops.scale(ops.exp(self.A_log), -1.0)
        B = ops.linear(seq, self.B_w)
        C = ops.linear(seq, self.C_w)
        return selective_scan(seq, delta, A, B, C, self.D)


class GTMB(Module):
    """Geometric transformation Mamba block.

    transform -> linear -> split; branch 1: depthwise 3x3 -> SiLU -> scan ->
    LayerNorm; gated by SiLU(branch 2); linear -> inverse transform.
    """

    def __init__(self, rng: np.random.Generator, channels: int, order: ScanOrder,
                 expand: int = 1, state_dim: int = 16):
        self.order = order
        e = channels * expand
        self.inner = e
        self.in_proj = Linear(rng, channels, 2 * e)
        self.dconv = DepthwiseConv2d(rng, e)
        self.ssm = SelectiveSSM(rng, e, state_dim)
        self.norm = LayerNorm(e)
        self.out_proj = Linear(rng, e, channels)

    def core(self, x: Tensor) -> Tensor:
        """The block on an already-transformed feature (FST walk, no transforms)."""
        if x.ndim != 4:
            raise ShapeError(f"GTMB expects (T, C, H, W), got {x.shape}")
        t, _, h, w = x.shape
        e = self.inner
        z = self.in_proj(x, axis=1)
        x1, x2 = ops.split_channels(z, 2, axis=1)
        x1 = ops.silu(self.dconv(x1))
        seq = ops.reshape(ops.permute(x1, (0, 2, 3, 1)), (t * h * w, e))
        seq = self.norm(self.ssm(seq), axis=-1)
        x1 = ops.permute(ops.reshape(seq, (t, h, w, e)), (0, 3, 1, 2))
        return self.out_proj(ops.mul(x1, ops.silu(x2)), axis=1)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] % 2:
            raise ShapeError(f"GTMB needs an even channel count, got shape {x.shape}")
        return inverse_transform(self.core(apply_transform(x, self.order)), self.order)


class CMM(Module):
    """Cascaded Mamba module: FST, BST, FTS, BTS blocks applied in sequence."""

    def __init__(self, rng: np.random.Generator, channels: int, expand: int = 1, state_dim: int = 16):
        self.blocks = [GTMB(rng, channels, order, expand, state_dim) for order in CASCADE]

    def __call__(self, f: Tensor) -> Tensor:
        for blk in self.blocks:
            f = blk(f)
        return f
