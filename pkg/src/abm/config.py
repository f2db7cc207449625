"""Flat ``key=value`` training configuration.

Every field is addressable by its name in a config file (``#`` starts a
comment) and by a command-line flag; flags override the file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from abm.decoder import DecoderConfig
from abm.encoder import EncoderConfig
from abm.model import VARIANTS, ModelConfig
from abm.nn import ConfigError


@dataclass
class TrainConfig:
    variant: str = "abm"
    lam: float = 0.5
    temperature: float = 2.0
    detach_target: bool = False
    batch_size: int = 16
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    clip: float = 100.0
    patience: int = 15
    max_lr_drops: int = 10
    epochs: int = 200
    seed: int = 0
    val_fraction: float = 0.1
    target_exprate: float = 101.0    # stop early once validation ExpRate reaches this
    max_len: int = 64
    sort_by_length: bool = False
    freeze_encoder: bool = False
    dtype: str = "float32"
    # encoder
    blocks: int = 3
    layers_per_block: int = 4
    growth_rate: int = 12
    initial_channels: int = 32
    downsample_factor: int = 8
    out_channels: int = 128
    # decoder
    hidden: int = 64
    attn_dim: int = 128
    k_s: int = 5
    k_l: int = 11
    coverage_channels: int = 64
    multiscale: bool = True

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1 or self.max_lr_drops < 1:
            raise ConfigError("batch_size, patience and max_lr_drops must be >= 1; epochs >= 0")
        if not self.temperature > 0 or self.lam < 0 or self.lr < 0:
            raise ConfigError("temperature must be > 0; lam and lr must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        enc = EncoderConfig(self.blocks, self.layers_per_block, self.growth_rate, self.initial_channels,
                            self.downsample_factor, self.out_channels or None)
        dec = DecoderConfig(vocab_size, self.hidden, self.attn_dim, self.k_s, self.k_l,
                            self.coverage_channels, self.multiscale)
        return ModelConfig(dec, enc, self.variant, self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def lines(self) -> list[str]:
        return [f"{k}={format_value(v)}" for k, v in self.to_dict().items()]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_lines(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        out[key.strip()] = coerce(key.strip(), raw)
    return out


def load_config(path=None, overrides: dict | None = None, base: TrainConfig | None = None) -> TrainConfig:
    values = parse_lines(Path(path).read_text(encoding="utf-8")) if path else {}
    for k, v in (overrides or {}).items():
        if k not in _TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = v
    cfg = dataclasses.replace(base or TrainConfig(), **values)
    cfg.validate()
    return cfg
