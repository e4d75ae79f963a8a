"""JSON run configuration: ``{"synth": {...}, "train": {...}}`` with strict keys."""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path

from .data import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _check_scalar(value, hint, where: str):
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _coerce(value, hint, where: str):
    if dataclasses.is_dataclass(hint):
        return from_dict(hint, value, where)
    origin = typing.get_origin(hint)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        (inner,) = typing.get_args(hint) or (None,)
        return [_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {value!r}")
        _, inner = typing.get_args(hint)
        return {str(k): _coerce(v, inner, f"{where}.{k}") for k, v in value.items()}
    return _check_scalar(value, hint, where)


def from_dict(cls, data, where: str = ""):
    """Build dataclass ``cls`` from ``data``; absent keys keep their defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {unknown}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


@dataclasses.dataclass
class RunConfig:
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"synth": to_dict(self.synth), "train": to_dict(self.train)}


def parse_run_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    cfg = from_dict(RunConfig, raw)
    try:
        cfg.train.validate(require_disc=True)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    return cfg


def load_run_config(path) -> RunConfig:
    """Read and validate a run config; I/O errors propagate as OSError."""
    return parse_run_config(Path(path).read_text())
