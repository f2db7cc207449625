"""DenseNet-lite feature extractor.

Layout (every conv is followed by re-masking so padded cells stay zero)::

    stem    conv3x3(1 -> c0), BN, ReLU, avg-pool 2
    block   L x [BN, ReLU, conv3x3(c -> g)], each output concatenated onto c
    (avg-pool 2 between blocks until the downsample factor is reached)
    head    BN, ReLU, conv1x1(c -> D) + bias      (only when out_channels is set)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from abm import ops
from abm.nn import ConfigError, Init, Module
from abm.tensor import Tensor


class InputError(ValueError):
    """An input image or sequence violates a precondition."""


@dataclass
class EncoderConfig:
    """Encoder hyperparameters.

    Trainable scalar count, with ``c_0 = initial_channels``, ``g = growth_rate``,
    ``L = layers_per_block`` and ``c`` running over the input width of every
    dense layer::

        stem   9*c_0 + 2*c_0
        layer  2*c + 9*c*g              (BN scale/shift + 3x3 kernel, no bias)
        head   2*C + C*D + D            (C = c_0 + blocks*L*g; omitted if D is None)

    The desk default (3 x 4 layers, g=12, c_0=32, D=128) has 152,720.
    """

    blocks: int = 3
    layers_per_block: int = 4
    growth_rate: int = 12
    initial_channels: int = 32
    downsample_factor: int = 8
    out_channels: Optional[int] = 128

    def validate(self) -> None:
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ConfigError(f"downsample_factor must be a power of two, got {f}")
        pools = int(math.log2(f))
        if pools > max(self.blocks, 1):
            raise ConfigError(f"downsample_factor {f} needs {pools} pools; "
                              f"{self.blocks} blocks allow at most {max(self.blocks, 1)}")
        if min(self.blocks, self.layers_per_block, self.growth_rate) < 0 or self.initial_channels < 1:
            raise ConfigError(f"invalid encoder config {self}")

    @property
    def dense_channels(self) -> int:
        return self.initial_channels + self.blocks * self.layers_per_block * self.growth_rate

    @property
    def feature_dim(self) -> int:
        return self.out_channels if self.out_channels is not None else self.dense_channels

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(config: EncoderConfig) -> int:
    c0, g = config.initial_channels, config.growth_rate
    total = 11 * c0
    c = c0
    for _ in range(config.blocks * config.layers_per_block):
        total += 2 * c + 9 * c * g
        c += g
    if config.out_channels is not None:
        D = config.out_channels
        total += 2 * c + c * D + D
    return total


@dataclass
class FeatureMap:
    """Encoder output: ``features`` is ``(B, D, H, W)``, ``mask`` is ``(B, H, W)``."""

    features: Tensor
    mask: np.ndarray

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[2], self.features.shape[3]

    @property
    def batch(self) -> int:
        return self.features.shape[0]

    @property
    def a(self) -> Tensor:
        """Flattened content vectors, ``(B, M, D)`` with ``M = H*W``."""
        B, D, H, W = self.features.shape
        return ops.transpose(ops.reshape(self.features, (B, D, H * W)), (0, 2, 1))

    def flat_mask(self) -> np.ndarray:
        return self.mask.reshape(self.mask.shape[0], -1)


class BatchNorm(Module):
    def __init__(self, init: Init, channels: int) -> None:
        super().__init__()
        self.gamma = init.ones(channels)
        self.beta = init.zeros(channels)
        self._buffers["running_mean"] = np.zeros(channels, dtype=np.float64)
        self._buffers["running_var"] = np.ones(channels, dtype=np.float64)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, mask, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training)


class DenseLayer(Module):
    def __init__(self, init: Init, in_ch: int, growth: int) -> None:
        super().__init__()
        self.norm = BatchNorm(init, in_ch)
        self.conv = init.weight(growth, in_ch, 3, 3)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        y = ops.conv2d(ops.relu(self.norm(x, mask)), self.conv, padding=1)
        return _remask(y, mask)


def _remask(x: Tensor, mask: np.ndarray) -> Tensor:
    return ops.mul(x, mask[:, None].astype(x.dtype))


class Encoder(Module):
    def __init__(self, config: EncoderConfig, init: Init) -> None:
        super().__init__()
        config.validate()
        self.config = config
        c = config.initial_channels
        self.stem = init.weight(c, 1, 3, 3)
        self.stem_norm = BatchNorm(init, c)
        self.layers: list[DenseLayer] = []
        for _ in range(config.blocks):
            for _ in range(config.layers_per_block):
                self.layers.append(DenseLayer(init, c, config.growth_rate))
                c += config.growth_rate
        if config.out_channels is not None:
            self.head_norm = BatchNorm(init, c)
            self.head = init.weight(config.out_channels, c, 1, 1)
            self.head_bias = init.zeros(config.out_channels)

    def pad_to_factor(self, images: np.ndarray, mask: np.ndarray):
        f = self.config.downsample_factor
        H, W = images.shape[-2:]
        ph, pw = (-H) % f, (-W) % f
        if ph or pw:
            images = np.pad(images, [(0, 0)] * (images.ndim - 2) + [(0, ph), (0, pw)])
            mask = np.pad(mask, [(0, 0)] * (mask.ndim - 2) + [(0, ph), (0, pw)])
        return images, mask

    def __call__(self, image, pixel_mask) -> FeatureMap:
        """Encode ``(1, H0, W0)`` / ``(B, 1, H0, W0)`` images with matching pixel masks."""
        img = image.data if isinstance(image, Tensor) else np.asarray(image)
        mask = np.asarray(pixel_mask)
        if img.ndim == 3:
            img = img[None]
        if mask.ndim == 2:
            mask = mask[None]
        f = self.config.downsample_factor
        if img.shape[-2] < f or img.shape[-1] < f:
            raise InputError(f"image {img.shape[-2:]} smaller than downsample factor {f}")
        if img.shape[0] != mask.shape[0] or img.shape[-2:] != mask.shape[-2:]:
            raise InputError(f"image {img.shape} and mask {mask.shape} disagree")
        img, mask = self.pad_to_factor(img, mask)
        mask = (mask != 0).astype(np.float32)
        dtype = self.stem.dtype
        x = Tensor((img * mask[:, None]).astype(dtype))

        pools_left = int(math.log2(f))
        x = _remask(ops.conv2d(x, self.stem, padding=1), mask)
        x = ops.relu(self.stem_norm(x, mask))
        if pools_left:
            x, mask = ops.avg_pool2d(x), ops.mask_pool(mask)
            pools_left -= 1
        L = self.config.layers_per_block
        for i, layer in enumerate(self.layers):
            x = ops.concat([x, layer(x, mask)], axis=1)
            end_of_block = (i + 1) % L == 0
            if end_of_block and pools_left and i + 1 < len(self.layers):
                x, mask = ops.avg_pool2d(x), ops.mask_pool(mask)
                pools_left -= 1
        if self.config.out_channels is not None:
            x = ops.relu(self.head_norm(x, mask))
            x = _remask(ops.conv2d(x, self.head, self.head_bias), mask)
        return FeatureMap(x, mask)
