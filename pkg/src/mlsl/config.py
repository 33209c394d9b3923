"""Run configuration: one JSON file, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from mlsl.bench import DomainShiftSpec, SceneSpec
from mlsl.trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_source: int = 200
    n_target: int = 200
    n_val: int = 50
    seed: int = 0


@dataclass(frozen=True)
class PathsConfig:
    """Default locations; a command flag always wins over these."""

    data: str | None = None  # dataset root holding one directory per domain
    source: str | None = None
    target: str | None = None
    val: str | None = None
    ckpt: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShiftSpec = field(default_factory=DomainShiftSpec.default)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    threads: int = 1

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def from_dict(cls, doc: dict, where: str = ""):
    """Build dataclass ``cls`` from ``doc``, recursing into nested dataclasses."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in doc:
            continue
        value = doc[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            value = from_dict(hint, value, f"{where}{f.name}.")
        else:
            value = _tuplify(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(RunConfig, doc)


def save_config(cfg: RunConfig, path: Path | str) -> None:
    Path(path).write_text(json.dumps(cfg.to_json(), indent=2) + "\n")


def override(obj, **changes):
    """``dataclasses.replace`` that ignores None values (unset CLI flags)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(obj, **changes) if changes else obj
