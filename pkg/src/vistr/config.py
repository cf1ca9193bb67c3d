"""Run configuration and its flat ``section.key = value`` text format.

Example::

    # comments start with '#'
    model.d = 96
    model.query_mode = prediction
    train.lr_transformer = 0.0001
    loss.mask = 1.0

Only the RNG seed may be overridden from the environment (``VISTR_SEED``).
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .synthdata import SynthConfig

QUERY_MODES = ("video", "frame", "instance", "prediction")
MASK_SOURCES = ("encoder", "backbone")
FRAME_ORDERS = ("in_order", "random")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 96
    n: int = 5
    T: int = 6
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 8
    K: int = 3
    ffn_dim: int = 384
    dropout: float = 0.0
    query_mode: str = "prediction"
    use_positional: bool = True
    pos_on_cross_keys: bool = True
    mask_feature_source: str = "encoder"
    use_3d_head: bool = True
    mask_channels: int = 8
    fusion_channels: int = 24

    @property
    def N(self) -> int:
        return self.n * self.T

    def validate(self) -> None:
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"model.query_mode must be one of {QUERY_MODES}, got {self.query_mode!r}")
        if self.mask_feature_source not in MASK_SOURCES:
            raise ConfigError(f"model.mask_feature_source must be one of {MASK_SOURCES}")
        if self.d % self.heads:
            raise ConfigError(f"model.d={self.d} is not divisible by model.heads={self.heads}")
        if self.use_positional and (self.d % 3 or (self.d // 3) % 2):
            raise ConfigError(f"model.d={self.d} must be divisible by 3 with d/3 even for positional encoding")
        if min(self.n, self.T, self.K, self.d) < 1:
            raise ConfigError("model.n, model.T, model.K and model.d must be positive")
        if self.mask_channels % 4 or self.fusion_channels % 4:
            raise ConfigError("mask and fusion channel counts must be multiples of 4 (group norm)")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: SynthConfig = field(default_factory=SynthConfig)
    lr_transformer: float = 1e-4
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-4
    clip_max_norm: float = 0.1
    epochs: int = 18
    lr_drop_epoch: int = 12
    max_steps: int = 0
    seed: int = 42
    deterministic: bool = False
    frame_order: str = "in_order"
    dataset: str = ""
    out_dir: str = "runs/default"
    eval_every: int = 0

    def validate(self) -> None:
        self.model.validate()
        self.data.validate()
        if self.lr_backbone > self.lr_transformer:
            raise ConfigError("train.lr_backbone must not exceed train.lr_transformer")
        if self.frame_order not in FRAME_ORDERS:
            raise ConfigError(f"train.frame_order must be one of {FRAME_ORDERS}")
        if self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("train.epochs and train.max_steps must be nonnegative")


_SECTIONS = {"model": "model", "loss": "loss", "data": "data"}


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def _field_types(obj) -> dict:
    hints = {}
    for f in dataclasses.fields(obj):
        default = getattr(obj, f.name)
        hints[f.name] = type(default)
    return hints


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, env: dict | None = None) -> TrainConfig:
    cfg = TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.rpartition(".")
        if section in ("", "train"):
            target = cfg
        elif section in _SECTIONS:
            target = getattr(cfg, _SECTIONS[section])
        else:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        types = _field_types(target)
        if name not in types or name in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(target, name, _parse_value(raw, types[name], key))
    env = os.environ if env is None else env
    if env.get("VISTR_SEED"):
        cfg.seed = _parse_value(env["VISTR_SEED"], int, "VISTR_SEED")
    return cfg


def serialize_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            continue
        lines.append(f"train.{f.name} = {_format_value(value)}")
    for section, attr in _SECTIONS.items():
        sub = getattr(cfg, attr)
        for f in dataclasses.fields(sub):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path, env: dict | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), env)
