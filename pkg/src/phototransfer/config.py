"""Plain-text ``key = value`` run configuration.

Defaults are the reference training recipe. Lines starting with ``#``
are comments; intervals are written ``lo, hi``; booleans ``true``/``false``;
``overlap = auto`` picks the receptive-field margin.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .augment import AttributeKind, AugmentPolicy
from .evaluate import TilePlan
from .trainer import TrainConfig, default_unet_config
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 0
    iterations: int = 1000
    batch_size: int = 16
    lr: float = 0.002
    crop: int = 128
    color_permute: bool = True
    rotation: tuple = (-90.0, 90.0)
    shear: tuple = (-45.0, 45.0)
    scale: tuple = (0.5, 2.0)
    base_channels: int = 16
    depth: int = 4
    leaky_slope: float = 0.2
    kind: str = "normals"
    variant: str = "photometricNet"
    tile: int = 256
    overlap: Optional[int] = None

    def train_config(self) -> TrainConfig:
        policy = AugmentPolicy(self.color_permute, tuple(self.rotation), tuple(self.shear), tuple(self.scale), self.crop)
        return TrainConfig(self.iterations, self.batch_size, self.lr, self.crop, policy, self.seed)

    def attribute_kind(self) -> AttributeKind:
        return AttributeKind.named(self.kind)

    def unet_config(self) -> UNetConfig:
        cfg = default_unet_config(self.attribute_kind(), self.base_channels, self.depth)
        return dataclasses.replace(cfg, leaky_slope=self.leaky_slope)

    def tile_plan(self) -> TilePlan:
        return TilePlan(self.tile, self.overlap)

    def with_values(self, values: dict[str, str]) -> "RunConfig":
        return dataclasses.replace(self, **{k: _convert(k, v) for k, v in values.items()})

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(f"{x:g}" for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "auto"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r} (known: {', '.join(sorted(_TYPES))})")
    kind = _TYPES[key]
    text = str(raw).strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            parts = [float(p) for p in text.replace("[", "").replace("]", "").split(",")]
            if len(parts) != 2:
                raise ValueError(text)
            return tuple(parts)
        if kind == "Optional[int]":
            return None if text.lower() in ("auto", "none", "") else int(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def load_config(path=None, overrides: Optional[dict[str, str]] = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (CLI flags win)."""
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.with_values(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = cfg.with_values(overrides)
    return cfg
