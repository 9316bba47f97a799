"""Parameter containers and the small layer set shared by every network."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Attribute-walking parameter registry.

    Parameters are discovered on instance attributes, including inside lists,
    tuples and dicts of sub-modules. Names are dotted attribute paths.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if id(p) in seen:
                raise ValueError(f"parameter shared under two names: {name}")
            seen.add(id(p))
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{path}.{k}")


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map over one axis; weight stored as (in, out)."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True, gain: float = 1.0):
        self.weight = Parameter(uniform_fan_in(rng, (n_in, n_out), n_in, gain))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor, axis: int = -1) -> Tensor:
        return ops.linear(x, self.weight, self.bias, axis=axis)


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        kernel: int = 3,
        stride: int = 1,
        bias: bool = True,
        zero_init: bool = False,
    ):
        shape = (c_out, c_in, kernel, kernel)
        w = np.zeros(shape) if zero_init else uniform_fan_in(rng, shape, c_in * kernel * kernel)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.pad = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        return ops.add_bias(y, self.bias, axis=1) if self.bias is not None else y


class DepthwiseConv2d(Module):
    def __init__(self, rng: np.random.Generator, channels: int, kernel: int = 3, bias: bool = True):
        self.weight = Parameter(uniform_fan_in(rng, (channels, 1, kernel, kernel), kernel * kernel))
        self.bias = Parameter(np.zeros(channels)) if bias else None
        self.pad = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, stride=1, pad=self.pad, depthwise=True)
        return ops.add_bias(y, self.bias, axis=1) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor, axis: int = 1) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, self.eps, axis=axis)


class ResBlock(Module):
    """conv-GELU-conv with an identity skip."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.conv1 = Conv2d(rng, channels, channels)
        self.conv2 = Conv2d(rng, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, self.conv2(ops.gelu(self.conv1(x))))
