"""Model and training configuration, stored as flat ``key = value`` text."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError, ParseError

MODALITIES = ("audio", "face", "body")


@dataclass
class ModelConfig:
    visual_widths: tuple = (16, 32, 64, 128)
    visual_blocks: tuple = (2, 2, 2, 2)
    audio_widths: tuple = (16, 32, 64, 128)
    audio_blocks: tuple = (3, 4, 6, 3)
    temporal_layers: int = 5
    embed_dim: int = 128
    se_reduction: int = 16
    heads: int = 8
    attention_sites: tuple = ("visual", "fused")
    crop_size: int = 112

    def __post_init__(self):
        for name in ("visual_widths", "visual_blocks", "audio_widths", "audio_blocks"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"{name} needs 4 stage values, got {value}")
            setattr(self, name, value)
        self.attention_sites = tuple(self.attention_sites)
        unknown = set(self.attention_sites) - {"visual", "fused"}
        if unknown:
            raise ConfigError(f"unknown attention sites: {sorted(unknown)}")
        if self.visual_widths[-1] % self.se_reduction:
            raise ConfigError("final visual width must be divisible by se_reduction")
        if any(w % self.se_reduction for w in self.audio_widths):
            raise ConfigError("every audio width must be divisible by se_reduction")
        if (3 * self.embed_dim) % self.heads or self.embed_dim % self.heads:
            raise ConfigError("embedding dims must be divisible by the number of heads")


@dataclass
class TrainConfig:
    epochs: int = 6
    base_lr: float = 1e-4
    lr_decay: float = 0.95
    batch_size: int = 8
    seed: int = 7
    clip_len: int = 25
    val_fraction: float = 0.2
    fused_weight: float = 1.0
    aux_weights: tuple = (0.4, 0.4, 0.4)
    class_weights: tuple = (1.0, 1.0)
    augment: bool = True
    flip: bool = True
    rotate_deg: float = 15.0
    crop_area: tuple = (0.87, 1.0)
    negative_audio: bool = True
    negative_p: float = 0.5
    negative_mode: str = "mix"

    def __post_init__(self):
        self.aux_weights = tuple(float(v) for v in self.aux_weights)
        self.class_weights = tuple(float(v) for v in self.class_weights)
        self.crop_area = tuple(float(v) for v in self.crop_area)
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if len(self.aux_weights) != 3 or len(self.class_weights) != 2:
            raise ConfigError("aux_weights needs 3 values and class_weights 2")
        if self.negative_mode not in ("mix", "replace"):
            raise ConfigError("negative_mode must be 'mix' or 'replace'")
        if self.epochs < 0 or self.batch_size < 1 or self.clip_len < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and clip_len >= 1 required")


def _coerce(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], str):
            return tuple(items)
        kind = type(default[0]) if default else float
        return tuple(kind(float(s)) if kind is int else kind(s) for s in items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_kv(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key = value, got {line!r}", line=lineno)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build(cls, values: dict, strict: bool = True):
    """Instantiate a config dataclass from string or typed values."""
    defaults = cls()
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in names:
            if strict:
                raise ConfigError(f"unknown {cls.__name__} key: {key}")
            continue
        default = getattr(defaults, key)
        if isinstance(value, str):
            try:
                value = _coerce(value, default)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        kwargs[key] = value
    return cls(**kwargs)


def load_configs(path=None, overrides: dict | None = None):
    """Read a flat config file holding keys of both ModelConfig and TrainConfig."""
    values = parse_kv(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = build(ModelConfig, {k: v for k, v in values.items() if k in model_keys})
    train = build(TrainConfig, {k: v for k, v in values.items() if k in train_keys})
    return model, train


def dump_kv(*configs) -> str:
    lines = []
    for cfg in configs:
        for key, value in dataclasses.asdict(cfg).items():
            lines.append(f"{key} = {_format(tuple(value) if isinstance(value, list) else value)}")
    return "\n".join(lines) + "\n"


def as_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


__all__ = [
    "MODALITIES", "ModelConfig", "TrainConfig", "parse_kv", "build", "load_configs",
    "dump_kv", "as_dict",
]
