"""Conditional channel-wise entropy model.

Per frame ``t`` the quantized latent is cut into five channel slices. Slice
``j`` is modelled as a discretized Gaussian whose parameters come from the
hyperprior features, the refined slices ``< j`` of the same frame and a
condition tensor ``c_t``. ``c_t`` is generated from the two previous refined
latents and from the previous latent warped by the motion between them.

Everything a slice head consumes is reconstructible by the decoder, so the
latent residual ``r`` that refines each slice costs no bits.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import ndtr

from . import ops
from .nn import Conv2d, LayerNorm, Linear, Module, ResBlock
from .tensor import Parameter, ShapeError, Tensor, make_result
from .transform_codec import N_SLICES, CodecConfig

SIGMA_MIN = 0.04
P_MIN = 2.0 ** -16
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ----------------------------------------------------------------------------
# quantization and likelihoods


def quantize(y: Tensor, mode: str = "infer", rng: np.random.Generator | None = None):
    """``infer``: round half away from zero. ``train``: ``(noisy, ste)`` pair.

    The noisy copy (``y + U(-0.5, 0.5)``) feeds the rate terms; the
    straight-through rounded copy feeds everything downstream.
    """
    if mode == "infer":
        return ops.round_ste(y)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs an rng")
        noise = rng.uniform(-0.5, 0.5, size=y.shape)
        return ops.add_const(y, noise), ops.round_ste(y)
    raise ValueError(f"unknown quantization mode {mode!r}")


def gaussian_mass(v: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """P(v) of a zero-mean Gaussian integrated over ``[v - 0.5, v + 0.5]`` (no floor)."""
    av = np.abs(v)
    return ndtr((0.5 - av) / sigma) - ndtr((-0.5 - av) / sigma)


def likelihood_array(y: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return np.maximum(gaussian_mass(y - mu, sigma), P_MIN)


def likelihood(y: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Discretized-Gaussian probability of ``y`` floored at ``P_MIN``.

    Below the floor the gradient still passes when it would raise the
    probability.
    """
    if not (y.shape == mu.shape == sigma.shape):
        raise ShapeError(f"likelihood shapes {y.shape}, {mu.shape}, {sigma.shape}")
    v = y.data - mu.data
    s = sigma.data
    av = np.abs(v)
    a = (0.5 - av) / s
    b = (-0.5 - av) / s
    p = ndtr(a) - ndtr(b)
    pa = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
    pb = _INV_SQRT_2PI * np.exp(-0.5 * b * b)
    dp_dv = np.sign(v) * (pb - pa) / s
    dp_ds = (b * pb - a * pa) / s
    floored = p < P_MIN

    def bw(g):
        g = g * (~floored | (g < 0))
        gv = g * dp_dv
        return gv, -gv, g * dp_ds

    return make_result(np.maximum(p, P_MIN), (y, mu, sigma), bw, "likelihood")


def bits(p: Tensor) -> Tensor:
    """Total information content ``-sum log2 p``."""
    return ops.scale(ops.sum(ops.log2(p)), -1.0)


# ----------------------------------------------------------------------------
# warping


def _bilinear_setup(flow: np.ndarray, h: int, w: int):
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = gx + flow[:, 0]
    sy = gy + flow[:, 1]
    inside_x = (sx > 0) & (sx < w - 1)
    inside_y = (sy > 0) & (sy < h - 1)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = sx - x0
    wy = sy - y0
    return x0, x1, y0, y1, wx, wy, inside_x, inside_y


def warp(feature: Tensor, flow: Tensor) -> Tensor:
    """Backward bilinear warp: ``out(p) = feature(p + flow(p))``, border-clamped.

    ``feature`` is (N, C, h, w); ``flow`` is (N, 2, h, w) holding (dx, dy) in
    latent pixels.
    """
    n, c, h, w = feature.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"warp: flow {flow.shape} for feature {feature.shape}")
    F = feature.data
    x0, x1, y0, y1, wx, wy, inside_x, inside_y = _bilinear_setup(flow.data, h, w)
    bidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]

    def gather(yy, xx):
        return F[bidx, cidx, yy[:, None], xx[:, None]]

    f00, f01 = gather(y0, x0), gather(y0, x1)
    f10, f11 = gather(y1, x0), gather(y1, x1)
    wx_, wy_ = wx[:, None], wy[:, None]
    out = (1 - wy_) * ((1 - wx_) * f00 + wx_ * f01) + wy_ * ((1 - wx_) * f10 + wx_ * f11)

    def bw(g):
        gfeat = None
        if feature.requires_grad:
            flat = np.zeros(n * c * h * w)
            base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
            for yy, xx, wgt in (
                (y0, x0, (1 - wy) * (1 - wx)),
                (y0, x1, (1 - wy) * wx),
                (y1, x0, wy * (1 - wx)),
                (y1, x1, wy * wx),
            ):
                idx = base + (yy * w + xx)[:, None]
                flat += np.bincount(idx.ravel(), weights=(g * wgt[:, None]).ravel(), minlength=flat.size)
            gfeat = flat.reshape(n, c, h, w)
        dx = ((1 - wy_) * (f01 - f00) + wy_ * (f11 - f10)) * g
        dy = ((1 - wx_) * (f10 - f00) + wx_ * (f11 - f01)) * g
        gflow = np.stack([dx.sum(axis=1) * inside_x, dy.sum(axis=1) * inside_y], axis=1)
        return gfeat, gflow

    return make_result(out, (feature, flow), bw, "warp")


# ----------------------------------------------------------------------------
# sub-networks


class HyperAnalysis(Module):
    def __init__(self, rng: np.random.Generator, m: int, nz: int):
        self.c1 = Conv2d(rng, m, nz, 3)
        self.c2 = Conv2d(rng, nz, nz, 3, stride=2)
        self.c3 = Conv2d(rng, nz, nz, 3, stride=2)

    def __call__(self, y: Tensor) -> Tensor:
        return self.c3(ops.gelu(self.c2(ops.gelu(self.c1(y)))))


class HyperSynthesis(Module):
    """ẑ -> (f_mu, f_sigma) at latent resolution."""

    def __init__(self, rng: np.random.Generator, nz: int, m: int):
        self.c1 = Conv2d(rng, nz, nz, 3)
        self.c2 = Conv2d(rng, nz, 2 * m, 3)

    def __call__(self, z: Tensor, h: int, w: int) -> tuple[Tensor, Tensor]:
        f = self.c2(ops.upsample_nearest(ops.gelu(self.c1(ops.upsample_nearest(z, 2))), 2))
        f = ops.crop2d(f, h, w)
        f_mu, f_sigma = ops.split_channels(f, 2, axis=1)
        return f_mu, f_sigma


class FactorizedPrior(Module):
    """Per-channel learned Gaussian for the hyper-latent."""

    def __init__(self, nz: int):
        self.mu = Parameter(np.zeros(nz))
        self.log_sigma = Parameter(np.zeros(nz))

    def params(self, shape: tuple) -> tuple[Tensor, Tensor]:
        mu = ops.expand_channels(self.mu, shape, axis=1)
        sigma = ops.expand_channels(ops.lower_bound(ops.exp(self.log_sigma), SIGMA_MIN), shape, axis=1)
        return mu, sigma

    def channel_params(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mu.data.copy(), np.maximum(np.exp(self.log_sigma.data), SIGMA_MIN)


class MotionEstimator(Module):
    """Flow between two refined latents through four residual blocks, then rectified."""

    def __init__(self, rng: np.random.Generator, m: int, channels: int):
        self.head = Conv2d(rng, 2 * m, channels, 3)
        self.blocks = [ResBlock(rng, channels) for _ in range(4)]
        self.tail = Conv2d(rng, channels, 2, 3, zero_init=True)
        self.alpha = Parameter(np.ones(2))
        self.beta = Parameter(np.zeros(2))

    def raw_flow(self, y_prev2: Tensor, y_prev1: Tensor) -> Tensor:
        x = self.head(ops.concat([y_prev2, y_prev1], axis=1))
        for blk in self.blocks:
            x = blk(x)
        return self.tail(x)

    def rectify(self, flow: Tensor) -> Tensor:
        return ops.add_bias(ops.scale_channels(flow, self.alpha, axis=1), self.beta, axis=1)

    def __call__(self, y_prev2: Tensor, y_prev1: Tensor) -> Tensor:
        return self.rectify(self.raw_flow(y_prev2, y_prev1))


class WindowAttention(Module):
    """Non-shifted windowed self-attention block (attention + MLP, pre-norm)."""

    def __init__(self, rng: np.random.Generator, channels: int, window: int = 4, heads: int = 1):
        if channels % heads:
            raise ValueError("attention width must divide by the head count")
        self.window = window
        self.heads = heads
        self.norm1 = LayerNorm(channels)
        self.qkv = Linear(rng, channels, 3 * channels)
        self.proj = Linear(rng, channels, channels)
        self.norm2 = LayerNorm(channels)
        self.fc1 = Linear(rng, channels, 2 * channels)
        self.fc2 = Linear(rng, 2 * channels, channels)

    def _mask(self, hp: int, wp: int, h: int, w: int) -> np.ndarray | None:
        if hp == h and wp == w:
            return None
        k = self.window
        valid = np.zeros((hp, wp), dtype=bool)
        valid[:h, :w] = True
        valid = valid.reshape(hp // k, k, wp // k, k).transpose(0, 2, 1, 3).reshape(-1, k * k)
        return np.where(valid[:, None, :], 0.0, -1e9)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        k = self.window
        hp, wp = -(-h // k) * k, -(-w // k) * k
        xp = ops.pad2d(x, hp - h, wp - w)
        nh, nw = hp // k, wp // k
        tok = ops.reshape(xp, (n, c, nh, k, nw, k))
        tok = ops.reshape(ops.permute(tok, (0, 2, 4, 3, 5, 1)), (n * nh * nw, k * k, c))
        mask = self._mask(hp, wp, h, w)

        qkv = self.qkv(self.norm1(tok, axis=-1))
        q, kk, v = ops.split_channels(qkv, 3, axis=-1)
        dh = c // self.heads
        outs = []
        for i in range(self.heads):
            qi = ops.take(q, -1, i * dh, (i + 1) * dh)
            ki = ops.take(kk, -1, i * dh, (i + 1) * dh)
            vi = ops.take(v, -1, i * dh, (i + 1) * dh)
            scores = ops.scale(ops.matmul(qi, ops.permute(ki, (0, 2, 1))), 1.0 / np.sqrt(dh))
            if mask is not None:
                scores = ops.add_const(scores, np.broadcast_to(mask, scores.shape))
            outs.append(ops.matmul(ops.softmax(scores, axis=-1), vi))
        att = outs[0] if self.heads == 1 else ops.concat(outs, axis=-1)
        tok = ops.add(tok, self.proj(att))
        tok = ops.add(tok, self.fc2(ops.gelu(self.fc1(self.norm2(tok, axis=-1)))))

        out = ops.permute(ops.reshape(tok, (n, nh, nw, k, k, c)), (0, 5, 1, 3, 2, 4))
        return ops.crop2d(ops.reshape(out, (n, c, hp, wp)), h, w)


class ConditionNetwork(Module):
    """Fuses (aligned, t-2, t-1) latents into a slice-width condition."""

    def __init__(self, rng: np.random.Generator, m: int, channels: int, out: int, pairs: int = 2,
                 window: int = 4, heads: int = 1):
        self.head = Conv2d(rng, 3 * m, channels, 3)
        self.stages = []
        for _ in range(pairs):
            self.stages.append(ResBlock(rng, channels))
            self.stages.append(WindowAttention(rng, channels, window, heads))
        self.tail = Conv2d(rng, channels, out, 3)

    def __call__(self, aligned: Tensor, y_prev2: Tensor, y_prev1: Tensor) -> Tensor:
        x = self.head(ops.concat([aligned, y_prev2, y_prev1], axis=1))
        for st in self.stages:
            x = st(x)
        return self.tail(x)


class _Head(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, hidden: int, c_out: int):
        self.c1 = Conv2d(rng, c_in, hidden, 3)
        self.c2 = Conv2d(rng, hidden, c_out, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return self.c2(ops.gelu(self.c1(x)))


class SliceNetwork(Module):
    """Slice ``j`` head trio: mean, scale and latent residual."""

    def __init__(self, rng: np.random.Generator, c_in: int, hidden: int, s: int):
        self.mu = _Head(rng, c_in, hidden, s)
        self.sigma = _Head(rng, c_in, hidden, s)
        self.res = _Head(rng, c_in, hidden, s)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        mu = self.mu(x)
        sigma = ops.lower_bound(ops.softplus(self.sigma(x)), SIGMA_MIN)
        r = ops.scale(ops.tanh(self.res(x)), 0.5)
        return mu, sigma, r


# ----------------------------------------------------------------------------
# the model

SliceSource = Callable[[int, int, Tensor, Tensor], Tensor]


class ConditionalEntropyModel(Module):
    def __init__(self, rng: np.random.Generator, cfg: CodecConfig):
        m, s = cfg.latent_channels, cfg.slice_channels
        self.cfg = cfg
        self.hyper_a = HyperAnalysis(rng, m, cfg.hyper_channels)
        self.hyper_s = HyperSynthesis(rng, cfg.hyper_channels, m)
        self.z_prior = FactorizedPrior(cfg.hyper_channels)
        self.motion = MotionEstimator(rng, m, cfg.motion_channels)
        self.cgn = ConditionNetwork(rng, m, cfg.cgn_channels, s, cfg.cgn_pairs, cfg.window, cfg.heads)
        self.slices = [SliceNetwork(rng, 2 * m + j * s + s, cfg.slice_hidden, s) for j in range(N_SLICES)]

    # -- hyperprior
    def hyper_encode(self, y: Tensor) -> Tensor:
        return self.hyper_a(y)

    def hyper_decode(self, z_hat: Tensor, h: int, w: int) -> tuple[Tensor, Tensor]:
        return self.hyper_s(z_hat, h, w)

    # -- temporal conditioning
    @staticmethod
    def references(history: list, zeros: Tensor) -> tuple[Tensor, Tensor]:
        """(ȳ_{t-2}, ȳ_{t-1}); zeros at GOP start, t-2 duplicated from t-1 at t=1."""
        if not history:
            return zeros, zeros
        if len(history) == 1:
            return history[0], history[0]
        return history[-2], history[-1]

    def condition(self, y_prev2: Tensor, y_prev1: Tensor, have_refs: bool = True) -> Tensor:
        """c_t from the two references; without references the flow is zero."""
        if have_refs:
            aligned = warp(y_prev1, self.motion(y_prev2, y_prev1))
        else:
            aligned = y_prev1
        return self.cgn(aligned, y_prev2, y_prev1)

    def slice_params(self, j: int, f_mu: Tensor, f_sigma: Tensor, prefix: list, cond: Tensor):
        if len(prefix) != j:
            raise RuntimeError(f"slice {j} sees {len(prefix)} decoded slices")
        return self.slices[j](ops.concat([f_mu, f_sigma, *prefix, cond], axis=1))

    def run_frames(self, f_mu: Tensor, f_sigma: Tensor, source: SliceSource, use_condition: bool = True) -> Tensor:
        """Sequential frame/slice loop shared by training, encoding and decoding.

        ``source(t, j, mu, sigma)`` returns the quantized slice ŷ_t^j; it is the
        only place encoder and decoder differ.
        """
        t_len, m, h, w = f_mu.shape
        s = self.cfg.slice_channels
        zeros_lat = Tensor(np.zeros((1, m, h, w)))
        zeros_cond = Tensor(np.zeros((1, s, h, w)))
        history: list = []
        for t in range(t_len):
            y2, y1 = self.references(history, zeros_lat)
            cond = self.condition(y2, y1, bool(history)) if use_condition else zeros_cond
            fm = ops.take(f_mu, 0, t, t + 1)
            fs = ops.take(f_sigma, 0, t, t + 1)
            refined: list = []
            for j in range(N_SLICES):
                mu, sigma, r = self.slice_params(j, fm, fs, refined, cond)
                y_hat = source(t, j, mu, sigma)
                refined.append(ops.add(y_hat, r))
            history.append(ops.concat(refined, axis=1))
        return ops.concat(history, axis=0)
