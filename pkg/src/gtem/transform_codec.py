"""Analysis and synthesis transforms built from EVSS blocks."""
from __future__ import annotations

import dataclasses
import json

import numpy as np

from . import ops
from .geom_scan import CMM
from .locality import LRFFN
from .nn import Conv2d, LayerNorm, Module
from .tensor import ShapeError, Tensor

N_SLICES = 5


@dataclasses.dataclass(frozen=True)
class CodecConfig:
    base_channels: int = 32
    latent_channels: int = 40
    blocks_per_stage: int = 1
    n_stages: int = 4
    state_dim: int = 16
    ssm_expand: int = 1
    hyper_channels: int = 32
    slice_hidden: int = 32
    motion_channels: int = 32
    cgn_channels: int = 32
    cgn_pairs: int = 2
    window: int = 4
    heads: int = 1

    def __post_init__(self):
        if self.latent_channels % N_SLICES:
            raise ValueError(f"latent channels {self.latent_channels} not divisible by {N_SLICES}")
        if self.base_channels % 2 or self.latent_channels % 2:
            raise ValueError("EVSS widths must be even")

    @property
    def factor(self) -> int:
        return 2 ** self.n_stages

    @property
    def slice_channels(self) -> int:
        return self.latent_channels // N_SLICES

    @property
    def encoder_widths(self) -> list[int]:
        return [self.base_channels] * (self.n_stages - 1) + [self.latent_channels]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


PRESETS = {
    "tiny": CodecConfig(),
    "full": CodecConfig(
        base_channels=128,
        latent_channels=320,
        hyper_channels=192,
        slice_hidden=128,
        motion_channels=64,
        cgn_channels=128,
    ),
}


class EVSS(Module):
    """x + CMM(LN(x)), then + LRFFN(LN(.))."""

    def __init__(self, rng: np.random.Generator, channels: int, cfg: CodecConfig):
        self.norm1 = LayerNorm(channels)
        self.cmm = CMM(rng, channels, cfg.ssm_expand, cfg.state_dim)
        self.norm2 = LayerNorm(channels)
        self.lrffn = LRFFN(rng, channels)

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.cmm(self.norm1(x)))
        return ops.add(x, self.lrffn(self.norm2(x)))


class AnalysisTransform(Module):
    """g_a: per stage a stride-2 3x3 conv then EVSS blocks."""

    def __init__(self, rng: np.random.Generator, cfg: CodecConfig):
        self.cfg = cfg
        self.down = []
        self.blocks = []
        c_prev = 3
        for width in cfg.encoder_widths:
            self.down.append(Conv2d(rng, c_prev, width, 3, stride=2))
            self.blocks.append([EVSS(rng, width, cfg) for _ in range(cfg.blocks_per_stage)])
            c_prev = width

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"encoder expects (T, 3, H, W), got {x.shape}")
        f = self.cfg.factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"frame size {x.shape[2:]} not divisible by {f}; pad first")
        for down, blocks in zip(self.down, self.blocks):
            x = down(x)
            for blk in blocks:
                x = blk(x)
        return x


class SynthesisTransform(Module):
    """g_s: per stage EVSS blocks, nearest x2 upsample, 3x3 conv."""

    def __init__(self, rng: np.random.Generator, cfg: CodecConfig):
        self.cfg = cfg
        widths = cfg.encoder_widths[::-1]
        outs = widths[1:] + [3]
        self.blocks = []
        self.up = []
        for c_in, c_out in zip(widths, outs):
            self.blocks.append([EVSS(rng, c_in, cfg) for _ in range(cfg.blocks_per_stage)])
            self.up.append(Conv2d(rng, c_in, c_out, 3))

    def __call__(self, y: Tensor, clamp: bool = True) -> Tensor:
        if y.ndim != 4 or y.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"decoder expects (T, {self.cfg.latent_channels}, h, w), got {y.shape}")
        for blocks, up in zip(self.blocks, self.up):
            for blk in blocks:
                y = blk(y)
            y = up(ops.upsample_nearest(y, 2))
        return ops.clamp(y, 0.0, 1.0) if clamp else y
