"""Minimal module system: parameter registration plus the standard layers.

Layers draw their initial values from an explicit ``numpy.random.Generator``
in construction order, so a seed pins every parameter bit.  Passing
``rng=None`` zero-fills (used when a checkpoint will overwrite everything).
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Parameter, Tensor

DTYPE = np.float32


def _uniform(rng: np.random.Generator | None, bound: float, shape, dtype=DTYPE) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng, bias: bool = True):
        bound = 1.0 / math.sqrt(c_in)
        self.weight = Parameter(_uniform(rng, bound, (c_in, c_out)))
        self.bias = Parameter(_uniform(rng, bound, (c_out,))) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, bias: bool = True, padding: str = "same"):
        fan_in = c_in * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, kernel, kernel)))
        self.bias = Parameter(_uniform(rng, bound, (c_out,))) if bias else None
        self.padding = padding

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class DepthwiseConv3x3(Module):
    def __init__(self, channels: int, rng, bias: bool = True):
        bound = 1.0 / 3.0  # fan_in = 9
        self.weight = Parameter(_uniform(rng, bound, (channels, 3, 3)))
        self.bias = Parameter(_uniform(rng, bound, (channels,))) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.dwconv3x3(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=DTYPE))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)
