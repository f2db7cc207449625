"""Shared encoder plus one or two decoding branches, per training variant.

=========  =================================================  ==============
variant    branches (name, direction, init)                   loss
=========  =================================================  ==============
uni-l2r    l2r (L2R, glorot)                                  CE
uni-r2l    r2l (R2L, he)                                      CE
aum        l2r (L2R, glorot), aux (L2R, he)                   CE + CE + lam*KL
abm        l2r (L2R, glorot), r2l (R2L, he)                   CE + CE + lam*KL
=========  =================================================  ==============

The first branch is the primary one used for validation and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from abm.decoder import L2R, R2L, Branch, DecoderConfig, Hypothesis, decode_greedy, decode_teacher_forced
from abm.encoder import Encoder, EncoderConfig, FeatureMap
from abm.nn import ConfigError, Init, Module, stream
from abm.objective import LossBreakdown, total_loss
from abm.tensor import no_grad

VARIANTS = {
    "uni-l2r": [("l2r", L2R, "glorot")],
    "uni-r2l": [("r2l", R2L, "he")],
    "aum": [("l2r", L2R, "glorot"), ("aux", L2R, "he")],
    "abm": [("l2r", L2R, "glorot"), ("r2l", R2L, "he")],
}


class CapabilityError(RuntimeError):
    """The loaded model lacks a requested component (e.g. a dropped branch)."""


@dataclass
class ModelConfig:
    decoder: DecoderConfig
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    variant: str = "abm"
    dtype: str = "float32"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.encoder.validate()
        self.decoder.validate()


class ABMModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, branches: list[str] | None = None) -> None:
        super().__init__()
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        self.encoder = Encoder(config.encoder, Init(stream(seed, "encoder"), "he", dtype))
        feat_dim = config.encoder.feature_dim
        self.branch_names: list[str] = []
        for name, direction, scheme in VARIANTS[config.variant]:
            if branches is not None and name not in branches:
                continue
            init = Init(stream(seed, "branch:" + name), scheme, dtype)
            setattr(self, name, Branch(config.decoder, feat_dim, init, direction))
            self.branch_names.append(name)

    @property
    def primary_name(self) -> str:
        return VARIANTS[self.config.variant][0][0]

    def branch(self, name: str | None = None) -> Branch:
        name = name or self.primary_name
        if name not in self.branch_names:
            raise CapabilityError(f"branch {name!r} not present (have: {', '.join(self.branch_names) or 'none'})")
        return getattr(self, name)

    def branches(self) -> list[Branch]:
        return [getattr(self, n) for n in self.branch_names]

    def drop_branch(self, name: str) -> None:
        self.branch(name)
        delattr(self, name)
        self.branch_names.remove(name)

    def encode(self, images, pixel_mask) -> FeatureMap:
        return self.encoder(images, pixel_mask)

    def loss(self, batch, lam: float = 0.5, S: float = 2.0, detach_target: bool = False) -> LossBreakdown:
        fmap = self.encode(batch.images, batch.pixel_mask)
        outs = [decode_teacher_forced(b, fmap, batch.targets) for b in self.branches()]
        return total_loss(outs[0], outs[1] if len(outs) > 1 else None, batch.targets, lam, S, detach_target)

    def recognize(self, images, pixel_mask, branch: str | None = None, max_len: int = 64,
                  keep_alphas: bool = False) -> list[Hypothesis]:
        was = self.training
        self.eval()
        try:
            with no_grad():
                return decode_greedy(self.branch(branch), self.encode(images, pixel_mask), max_len, keep_alphas)
        finally:
            self.train(was)
