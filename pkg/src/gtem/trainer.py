"""Rate-distortion training: losses, synthetic clips, Adam and the two stages."""
from __future__ import annotations

import dataclasses
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import ops
from .model import LAMBDAS, VideoCodec
from .nn import Conv2d, Module
from .tensor import NonFiniteError, Parameter, Tensor, backward

PATTERNS = ("gradient", "checkerboard", "noise")


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclasses.dataclass(frozen=True)
class LossWeights:
    lam: float = 256.0
    lam_per: float = 1.0
    lam_sty: float = 0.15

    def __post_init__(self):
        if min(self.lam, self.lam_per, self.lam_sty) < 0:
            raise ValueError("loss weights must be non-negative")


STAGE1_WEIGHTS = LossWeights(lam_per=0.0, lam_sty=0.0)


# ----------------------------------------------------------------------------
# losses


@dataclasses.dataclass
class LossTerms:
    total: Tensor
    rate_y: float = 0.0
    rate_z: float = 0.0
    distortion: float = 0.0
    perceptual: float = 0.0
    style: float = 0.0

    def as_record(self) -> dict:
        return {
            "rd": self.rate_y + self.rate_z + self.distortion,
            "rate_y": self.rate_y,
            "rate_z": self.rate_z,
            "distortion": self.distortion,
            "perceptual": self.perceptual,
            "style": self.style,
        }


def _bits(liks: Sequence[Tensor]) -> Tensor:
    acc = None
    for p in liks:
        b = ops.sum(ops.log2(p))
        acc = b if acc is None else ops.add(acc, b)
    return ops.scale(acc, -1.0)


def rd_loss(x, x_hat: Tensor, y_likelihoods: Sequence, z_likelihoods: Sequence, lam: float) -> LossTerms:
    """Sum over frames of (y bits + z bits) / pixels + lam * MSE.

    ``y_likelihoods[t]`` is a list of per-slice likelihood tensors for frame
    ``t``; ``z_likelihoods[t]`` a single tensor.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != x_hat.shape:
        raise ValueError(f"x {x.shape} vs x_hat {x_hat.shape}")
    t_len, _, h, w = x.shape
    if len(y_likelihoods) != t_len or len(z_likelihoods) != t_len:
        raise ValueError("one likelihood group per frame expected")
    pixels = float(h * w)
    rate_y = ops.scale(ops.add_all([_bits(fr) for fr in y_likelihoods]), 1.0 / pixels)
    rate_z = ops.scale(ops.add_all([_bits([p]) for p in z_likelihoods]), 1.0 / pixels)
    dist = ops.add_all([
        ops.scale(ops.mean(ops.square(ops.sub(ops.take(x_hat, 0, t, t + 1), ops.take(x, 0, t, t + 1)))), lam)
        for t in range(t_len)
    ])
    total = ops.add(ops.add(rate_y, rate_z), dist)
    return LossTerms(total, rate_y.item(), rate_z.item(), dist.item())


class FeatureExtractor(Module):
    """Frozen seed-fixed three-stage conv stack; returns every stage's features."""

    def __init__(self, seed: int = 1234, widths=(8, 16, 32)):
        rng = np.random.default_rng(seed)
        self.stages = []
        c_prev = 3
        for i, c in enumerate(widths):
            self.stages.append(Conv2d(rng, c_prev, c, 3, stride=1 if i == 0 else 2))
            c_prev = c
        for p in self.parameters():
            p.trainable = False
            p.requires_grad = False

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for conv in self.stages:
            x = ops.gelu(conv(x))
            feats.append(x)
        return feats


def gram(f: Tensor) -> Tensor:
    """Channel Gram matrices ``F F^T / n`` of (T, C, H, W) features -> (T, C, C)."""
    t, c, h, w = f.shape
    flat = ops.reshape(f, (t, c, h * w))
    return ops.scale(ops.matmul(flat, ops.permute(flat, (0, 2, 1))), 1.0 / (h * w))


def perceptual_style_loss(x, x_hat: Tensor, fe: FeatureExtractor, w: LossWeights) -> LossTerms:
    """Per frame and stage: lam_per * RMS feature error + lam_sty * mean |Gram difference|."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    feats_ref = fe(x)
    feats_rec = fe(x_hat)
    per_terms, sty_terms = [], []
    for fr, fx in zip(feats_rec, feats_ref):
        n = float(np.prod(fr.shape[1:]))
        diff = ops.sub(fr, fx)
        gdiff = ops.sub(gram(fr), gram(fx))
        for t in range(fr.shape[0]):
            per_terms.append(ops.scale(ops.norm2(ops.take(diff, 0, t, t + 1)), 1.0 / np.sqrt(n)))
            sty_terms.append(ops.mean(ops.abs(ops.take(gdiff, 0, t, t + 1))))
    per = ops.scale(ops.add_all(per_terms), w.lam_per)
    sty = ops.scale(ops.add_all(sty_terms), w.lam_sty)
    return LossTerms(ops.add(per, sty), perceptual=per.item(), style=sty.item())


def total_loss(model_out, x, w: LossWeights, fe: FeatureExtractor | None = None) -> LossTerms:
    terms = rd_loss(x, model_out.x_hat, model_out.y_likelihoods, model_out.z_likelihoods, w.lam)
    if fe is None or (w.lam_per == 0 and w.lam_sty == 0):
        return terms
    ps = perceptual_style_loss(x, model_out.x_hat, fe, w)
    return LossTerms(ops.add(terms.total, ps.total), terms.rate_y, terms.rate_z, terms.distortion,
                     ps.perceptual, ps.style)


# ----------------------------------------------------------------------------
# synthetic data


@dataclasses.dataclass(frozen=True)
class SyntheticClipSpec:
    pattern: str
    velocity: tuple  # (dx, dy) pixels per frame
    length: int = 8
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.length < 1:
            raise ValueError("clip length must be >= 1")


@dataclasses.dataclass
class Clip:
    frames: np.ndarray  # (T, 3, H, W) in [0, 1]
    spec: SyntheticClipSpec

    @property
    def velocity(self) -> tuple:
        return self.spec.velocity


def _first_frame(spec: SyntheticClipSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.pattern == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h) % 1.0
        lo = rng.uniform(0, 0.5, size=(3, 1, 1))
        hi = rng.uniform(0.5, 1, size=(3, 1, 1))
        return lo + (hi - lo) * ramp[None]
    if spec.pattern == "checkerboard":
        cell = int(rng.choice([4, 8, 16]))
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        mask = ((yy // cell + xx // cell) % 2).astype(np.float64)
        a = rng.uniform(0, 1, size=(3, 1, 1))
        b = rng.uniform(0, 1, size=(3, 1, 1))
        return a + (b - a) * mask[None]
    noise = gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, *[rng.uniform(1.5, 4.0)] * 2), mode="wrap")
    lo = noise.min(axis=(1, 2), keepdims=True)
    hi = noise.max(axis=(1, 2), keepdims=True)
    return (noise - lo) / np.maximum(hi - lo, 1e-12)


def render_clip(spec: SyntheticClipSpec, rng: np.random.Generator) -> Clip:
    """Constant-velocity translation with wraparound of a random first frame."""
    frame0 = _first_frame(spec, rng)
    dx, dy = (int(v) for v in spec.velocity)
    frames = np.stack([np.roll(frame0, (t * dy, t * dx), axis=(-2, -1)) for t in range(spec.length)])
    return Clip(frames, spec)


def make_synthetic_dataset(specs: Sequence[SyntheticClipSpec], seed: int = 0) -> list[Clip]:
    rng = np.random.default_rng(seed)
    return [render_clip(s, rng) for s in specs]


def random_specs(n: int, seed: int = 0, length: int = 8, size: int = 64, max_speed: int = 3,
                 patterns: Sequence[str] = PATTERNS) -> list[SyntheticClipSpec]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        v = tuple(int(c) for c in rng.integers(-max_speed, max_speed + 1, size=2))
        out.append(SyntheticClipSpec(patterns[i % len(patterns)], v, length, size, size))
    return out


# ----------------------------------------------------------------------------
# optimization


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if not np.isfinite(total):
        raise TrainingDiverged(f"non-finite gradient norm {total}")
    if total > max_norm:
        s = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total


def stage2_lr_factor(step: int, steps: int) -> float:
    """Halve at 90% and again at 96% of the run."""
    if step >= 0.96 * steps:
        return 0.25
    if step >= 0.9 * steps:
        return 0.5
    return 1.0


@dataclasses.dataclass
class TrainResult:
    history: list  # one record dict per step
    state: dict
    seconds: float

    def series(self, key: str = "rd") -> np.ndarray:
        return np.array([r[key] for r in self.history])


def smooth(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        raise ValueError(f"need at least {window} values to smooth")
    return np.convolve(v, np.ones(window) / window, mode="valid")


def format_record(rec: dict) -> str:
    keys = ("rd", "rate_y", "rate_z", "distortion", "perceptual", "style")
    return f"step={rec['step']} " + " ".join(f"{k}={rec[k]:.8g}" for k in keys)


def train(model: VideoCodec, clips: Sequence[Clip], weights: LossWeights, steps: int, seed: int = 0,
          lr: float = 1e-4, gop: int = 5, max_grad_norm: float = 1.0,
          lr_schedule: Callable[[int, int], float] | None = None, fe: FeatureExtractor | None = None,
          log_path: str | Path | None = None, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on random GOP windows of ``clips``; deterministic for a fixed seed."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if any(c.frames.shape[0] < gop for c in clips):
        raise ValueError(f"every clip needs at least {gop} frames")
    rng = np.random.default_rng(seed)
    params = model.trainable_parameters()
    opt = Adam(params, lr=lr)
    history = []
    log = open(log_path, "w") if log_path else None
    start = time.perf_counter()
    try:
        for step in range(steps):
            clip = clips[int(rng.integers(len(clips)))]
            t0 = int(rng.integers(clip.frames.shape[0] - gop + 1))
            x = clip.frames[t0:t0 + gop]
            try:
                out = model.forward_train(x, rng)
                terms = total_loss(out, x, weights, fe)
                model.zero_grad()
                backward(terms.total)
            except NonFiniteError as err:
                last = history[-1] if history else None
                raise TrainingDiverged(f"step {step}: {err}; previous record {last}") from err
            clip_grad_norm(params, max_grad_norm)
            opt.lr = lr * (lr_schedule(step, steps) if lr_schedule else 1.0)
            opt.step()
            rec = {"step": step, **terms.as_record()}
            history.append(rec)
            if log:
                log.write(format_record(rec) + "\n")
                log.flush()
            if progress:
                progress(rec)
    finally:
        if log:
            log.close()
    model.zero_grad()
    return TrainResult(history, model.state_dict(), time.perf_counter() - start)


def train_stage1(model: VideoCodec, clips: Sequence[Clip], lam: float = LAMBDAS[1], steps: int = 5000,
                 seed: int = 0, **kw) -> TrainResult:
    return train(model, clips, LossWeights(lam, 0.0, 0.0), steps, seed, **kw)


def train_stage2(model: VideoCodec, clips: Sequence[Clip], weights: LossWeights = LossWeights(),
                 steps: int = 2000, seed: int = 1, fe: FeatureExtractor | None = None, gop: int = 7,
                 **kw) -> TrainResult:
    fe = fe if fe is not None else FeatureExtractor()
    return train(model, clips, weights, steps, seed, gop=gop, lr_schedule=stage2_lr_factor, fe=fe, **kw)


# ----------------------------------------------------------------------------
# evaluation


@dataclasses.dataclass
class ClipReport:
    bpp: float
    psnr: float


def evaluate(model: VideoCodec, clips: Sequence[Clip], use_condition: bool = True) -> ClipReport:
    """Mean coded bpp (range-coded payload bits) and mean PSNR over clips coded as one GOP each."""
    from .metrics import psnr

    bpps, psnrs = [], []
    for clip in clips:
        t, _, h, w = clip.frames.shape
        enc = model.encode_gop(clip.frames, use_condition)
        bpps.append(8.0 * enc.payload.payload_bytes() / (t * h * w))
        psnrs.append(np.mean([psnr(a, b) for a, b in zip(clip.frames, enc.x_hat)]))
    return ClipReport(float(np.mean(bpps)), float(np.mean(psnrs)))
