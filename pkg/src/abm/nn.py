"""Parameter containers and weight initializers."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from abm.tensor import Tensor


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class Module:
    """Owns parameters (Tensors with ``requires_grad``), buffers and child modules.

    Traversal follows attribute insertion order, so parameter names and order
    are deterministic.
    """

    training: bool = True

    def __init__(self) -> None:
        self._buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, buf in self._buffers.items():
            yield prefix + key, buf
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def fans(shape: tuple) -> tuple[int, int]:
    if len(shape) == 4:  # conv kernel (O, C, kh, kw)
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    if len(shape) == 2:
        return shape[0], shape[1]
    return shape[0], shape[0]


def glorot_uniform(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in, fan_out = fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def he_normal(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in, _ = fans(shape)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


INITIALIZERS = {"glorot": glorot_uniform, "he": he_normal}


class Init:
    """Creates named parameters from one RNG stream with one weight scheme."""

    def __init__(self, rng: np.random.Generator, scheme: str, dtype) -> None:
        if scheme not in INITIALIZERS:
            raise ConfigError(f"unknown init scheme {scheme!r}")
        self.rng = rng
        self.fn = INITIALIZERS[scheme]
        self.dtype = np.dtype(dtype)

    def weight(self, *shape: int) -> Tensor:
        return Tensor(self.fn(self.rng, shape, self.dtype), requires_grad=True)

    def zeros(self, *shape: int) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, *shape: int) -> Tensor:
        return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent RNG per named component, so draw order never couples them."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
