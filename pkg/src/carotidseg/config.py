"""Declarative run configuration (JSON) with strict key checking."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

from .augment import AugmentPolicy
from .net import NetConfig
from .phantom import PhantomSpec
from .trainer import TrainConfig

RESULTS_ENV = "CAROTIDSEG_RESULTS"


class ConfigError(ValueError):
    """Invalid or unknown configuration entries."""


@dataclass(frozen=True)
class CohortConfig:
    n_volumes: int = 20
    seed: int = 0
    artery: str = "CCA"


@dataclass(frozen=True)
class PathsConfig:
    cohort: str = "cohort"
    results: str = "results"


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def results_root(self) -> Path:
        return Path(os.environ.get(RESULTS_ENV) or self.paths.results)


_NESTED = {("train", "augment_policy"): AugmentPolicy}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for section, values in (overrides or {}).items():
        data.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    return _build(RunConfig, data, "config")
