"""Difference convolutions, the hybrid convolution block and LRFFN.

Each difference convolution is a fixed linear rewrite of a 3x3 kernel into an
ordinary kernel, so every branch runs through :func:`gtem.ops.conv2d`.
Kernel position ``(i, j)`` weights the neighbour at offset ``(i - 1, j - 1)``.

* CENTRAL: ``sum_i w_i (x_i - x_c)``.
* VERTICAL: pair ``(r, j) - (r + 1, j)`` weighted by ``w[r, j]``, r in {0, 1}.
* HORIZONTAL: pair ``(i, c) - (i, c + 1)`` weighted by ``w[i, c]``, c in {0, 1}.
* ANGULAR: ring neighbour minus its clockwise successor, weighted by ``w`` at
  the first of the two.
"""
from __future__ import annotations

import enum

import numpy as np

from . import ops
from .nn import Linear, Module, uniform_fan_in
from .tensor import Parameter, ShapeError, Tensor

RING = ((0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0))


class DiffConvKind(enum.Enum):
    CENTRAL = "central"
    VERTICAL = "vertical"
    HORIZONTAL = "horizontal"
    ANGULAR = "angular"
    VANILLA = "vanilla"


HCB_KINDS = (
    DiffConvKind.VERTICAL,
    DiffConvKind.HORIZONTAL,
    DiffConvKind.ANGULAR,
    DiffConvKind.CENTRAL,
    DiffConvKind.VANILLA,
)


def _pair_matrix(pairs) -> np.ndarray:
    """Rewrite matrix R with w'_flat = R @ w_flat for sum_(a,b) w[a] (x_a - x_b)."""
    R = np.zeros((9, 9))
    for a, b in pairs:
        ia = a[0] * 3 + a[1]
        ib = b[0] * 3 + b[1]
        R[ia, ia] += 1.0
        R[ib, ia] -= 1.0
    return R


def rewrite_matrix(kind: DiffConvKind) -> np.ndarray:
    if kind is DiffConvKind.VANILLA:
        return np.eye(9)
    if kind is DiffConvKind.CENTRAL:
        R = np.eye(9)
        R[4, :] -= 1.0
        return R
    if kind is DiffConvKind.VERTICAL:
        return _pair_matrix([((r, j), (r + 1, j)) for r in range(2) for j in range(3)])
    if kind is DiffConvKind.HORIZONTAL:
        return _pair_matrix([((i, c), (i, c + 1)) for i in range(3) for c in range(2)])
    if kind is DiffConvKind.ANGULAR:
        return _pair_matrix([(RING[k], RING[(k + 1) % 8]) for k in range(8)])
    raise ValueError(kind)


_REWRITE_T = {kind: Tensor(rewrite_matrix(kind).T.copy()) for kind in DiffConvKind}


def rewrite_kernel(k: Tensor, kind: DiffConvKind) -> Tensor:
    if k.shape[-2:] != (3, 3):
        raise ShapeError(f"difference convolution needs a 3x3 kernel, got {k.shape}")
    if kind is DiffConvKind.VANILLA:
        return k
    flat = ops.reshape(k, (-1, 9))
    return ops.reshape(ops.linear(flat, _REWRITE_T[kind]), k.shape)


def rewrite_kernel_array(k: np.ndarray, kind: DiffConvKind) -> np.ndarray:
    shape = k.shape
    return (k.reshape(-1, 9) @ rewrite_matrix(kind).T).reshape(shape)


def diff_conv(x: Tensor, k: Tensor, kind: DiffConvKind, depthwise: bool = True) -> Tensor:
    """Difference convolution, stride 1, padding 1."""
    return ops.conv2d(x, rewrite_kernel(k, kind), stride=1, pad=1, depthwise=depthwise)


class HCB(Module):
    """Five parallel depthwise branches summed, then a 1x1 channel mix.

    Only the vanilla branch carries a bias, so difference branches vanish on
    flat inputs. The forward pass convolves once with the summed rewritten
    kernel; :meth:`branches` evaluates the five convolutions separately.
    """

    def __init__(self, rng: np.random.Generator, channels: int):
        self.kernels = {
            kind.value: Parameter(uniform_fan_in(rng, (channels, 1, 3, 3), 9 * len(HCB_KINDS)))
            for kind in HCB_KINDS
        }
        self.bias = Parameter(np.zeros(channels))
        self.mix = Linear(rng, channels, channels)

    def branches(self, x: Tensor) -> list[Tensor]:
        return [diff_conv(x, self.kernels[kind.value], kind) for kind in HCB_KINDS]

    def merged_kernel(self) -> np.ndarray:
        return sum(rewrite_kernel_array(self.kernels[kind.value].data, kind) for kind in HCB_KINDS)

    def fused_kernel(self) -> Tensor:
        acc = None
        for kind in HCB_KINDS:
            k = rewrite_kernel(self.kernels[kind.value], kind)
            acc = k if acc is None else ops.add(acc, k)
        return acc

    def branch_sum(self, x: Tensor) -> Tensor:
        outs = self.branches(x)
        acc = outs[0]
        for o in outs[1:]:
            acc = ops.add(acc, o)
        return acc

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.fused_kernel(), stride=1, pad=1, depthwise=True)
        return self.mix(ops.add_bias(y, self.bias, axis=1), axis=1)


class LRFFN(Module):
    """linear -> GELU -> split; GELU(HCB(E1)) gates E2; linear back to width."""

    def __init__(self, rng: np.random.Generator, channels: int, hidden: int | None = None):
        hidden = channels if hidden is None else hidden
        self.hidden = hidden
        self.expand = Linear(rng, channels, 2 * hidden)
        self.hcb = HCB(rng, hidden)
        self.project = Linear(rng, hidden, channels)

    def __call__(self, e: Tensor) -> Tensor:
        z = ops.gelu(self.expand(e, axis=1))
        if z.shape[1] % 2:
            raise ShapeError(f"LRFFN expanded width {z.shape[1]} is odd")
        e1, e2 = ops.split_channels(z, 2, axis=1)
        return self.project(ops.mul(ops.gelu(self.hcb(e1)), e2), axis=1)
