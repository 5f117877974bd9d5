"""Flat ``section.key = value`` run configuration.

Every field of TrainConfig, AugmentConfig and BackboneConfig is
addressable by a dotted key; ``data.*`` and ``eval.*`` hold the remaining
run settings. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .backbone import BackboneConfig, StageSpec, scale_config
from .errors import ConfigError, ContractViolation
from .imaging import AugmentConfig
from .train import TrainConfig

CONFIG_NAME = "config.txt"


@dataclass(frozen=True)
class DataConfig:
    source: str = ""  # dataset directory, or "synth"
    format: str = "auto"  # auto | cuhk01 | generic | synthetic
    synth_ids: int = 8
    per_camera: int = 2
    test_ids: Optional[int] = None  # None: 486 for CUHK01, otherwise 0

    def __post_init__(self):
        if self.format not in ("auto", "cuhk01", "generic", "synthetic"):
            raise ContractViolation(f"unknown dataset format {self.format!r}")
        if self.synth_ids < 1 or self.per_camera < 1:
            raise ContractViolation("synth_ids and per_camera must be >= 1")
        if self.test_ids is not None and self.test_ids < 0:
            raise ContractViolation(f"test_ids must be >= 0, got {self.test_ids}")

    @property
    def is_synthetic(self) -> bool:
        return self.format == "synthetic" or self.source == "synth"


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ContractViolation(f"trials must be >= 1, got {self.trials}")


SECTIONS = {
    "data": DataConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "backbone": BackboneConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def model_config(self) -> BackboneConfig:
        """Backbone with the width/depth multipliers applied to the stage table."""
        b = self.backbone
        base = dataclasses.replace(b, width_mult=1.0, depth_mult=1.0)
        return scale_config(base, b.width_mult, b.depth_mult)

    def items(self) -> list[tuple[str, str]]:
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            hints = typing.get_type_hints(type(obj))
            for f in dataclasses.fields(obj):
                out.append((f"{section}.{f.name}", _format(getattr(obj, f.name), hints[f.name])))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def write(self, directory: str | os.PathLike) -> Path:
        path = Path(directory) / CONFIG_NAME
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides; values may be strings or already typed."""
        grouped: dict[str, dict[str, Any]] = {}
        for key, value in overrides.items():
            section, name = _split_key(key)
            hint = _field_hints(section).get(name)
            if hint is None:
                raise ConfigError(f"unknown config key {key!r}")
            grouped.setdefault(section, {})[name] = _parse(value, hint, key) if isinstance(value, str) else value
        updated = {}
        for section, values in grouped.items():
            try:
                updated[section] = dataclasses.replace(getattr(self, section), **values)
            except ContractViolation as exc:
                raise ConfigError(f"invalid {section} settings: {exc}") from None
        return dataclasses.replace(self, **updated)


def _split_key(key: str) -> tuple[str, str]:
    section, dot, name = key.partition(".")
    if not dot or section not in SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    return section, name


def _field_hints(section: str) -> dict[str, Any]:
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _unwrap_optional(hint) -> tuple[Any, bool]:
    args = typing.get_args(hint)
    if typing.get_origin(hint) is typing.Union and type(None) in args:
        return next(a for a in args if a is not type(None)), True
    return hint, False


def _parse(text: str, hint, key: str):
    hint, optional = _unwrap_optional(hint)
    text = text.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if hint is bool:
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if typing.get_origin(hint) is tuple:
            return tuple(StageSpec.decode(s) for s in text.split(",") if s.strip())
    except (ValueError, ContractViolation) as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from None
    raise ConfigError(f"unsupported config type for {key!r}")


def _format(value, hint) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(s.encode() for s in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """``key = value`` lines to a dict; later duplicates win."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq or not key.strip():
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        section, name = _split_key(key)
        if name not in _field_hints(section):
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path: str | os.PathLike, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {os.fspath(path)!r}: {exc.strerror}") from None
    return (base or RunConfig()).with_overrides(parse_config_text(text, os.fspath(path)))
