"""Declarative run configuration stored as TOML.

Unknown keys are rejected. Errors carry the file name and line number of the
offending key where it can be located.
"""

from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .data import SyntheticSpec
from .features import TapSpec
from .losses import LossWeights
from .predictor import PredictorConfig, SkipConfig
from .training import CycleSchedule, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    path: str | None = None
    target_size: int | None = None
    random_crop: bool = False
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ValueError(f"dataset kind must be 'synthetic' or 'directory', got {self.kind!r}")
        if self.kind == "directory" and not self.path:
            raise ValueError("directory datasets need a path")


@dataclass(frozen=True)
class MetricsConfig:
    horizons: tuple[int, ...] = (10, 50)
    max_clips: int = 32
    temporal_pooling: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        if any(h < 1 for h in self.horizons):
            raise ValueError("horizons must be positive")


@dataclass
class RunConfig:
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    features: TapSpec = field(default_factory=TapSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "runs/default"

    @property
    def seed(self) -> int:
        return self.train.seed

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, seed: int | None = None, deterministic: bool | None = None,
                       output_dir: str | None = None) -> "RunConfig":
        train = self.train
        if seed is not None:
            train = dataclasses.replace(train, seed=seed)
        if deterministic is not None:
            train = dataclasses.replace(train, deterministic=deterministic)
        return dataclasses.replace(self, train=train,
                                   output_dir=output_dir if output_dir is not None else self.output_dir)

    def validate_paths(self) -> None:
        if self.dataset.kind == "directory" and not Path(self.dataset.path).is_dir():
            raise ConfigError(f"dataset path does not exist: {self.dataset.path}")
        if self.features.weights_source == "file" and not Path(self.features.weights_path).is_file():
            raise ConfigError(f"features weights file does not exist: {self.features.weights_path}")


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if getattr(obj, f.name) is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dumps(config: RunConfig) -> str:
    return tomli_w.dumps(_plain(config))


def save(config: RunConfig, path) -> None:
    Path(path).write_text(dumps(config))


def _locate(text: str, section: tuple[str, ...], key: str | None) -> int | None:
    """1-based line of ``key`` inside table ``section`` (or of the table header)."""
    current: tuple[str, ...] = ()
    header_line = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"^\[([^\[\]]+)\]", stripped)
        if m:
            current = tuple(p.strip() for p in m.group(1).split("."))
            if key is not None and current[:len(section) + 1] == section + (key,):
                return lineno  # the key names a sub-table
            if current == section:
                header_line = lineno
            continue
        if current == section and key is not None and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return lineno
    return header_line


def _build(cls, data, section: tuple[str, ...], text: str, source: str):
    def fail(msg, key=None):
        line = _locate(text, section, key)
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: {msg}")

    if not isinstance(data, dict):
        fail(f"[{'.'.join(section)}] must be a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            fail(f"unknown key {key!r} in [{'.'.join(section) or 'top level'}]", key)
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, section + (key,), text, source)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        mentioned = [k for k in data if re.search(rf"\b{re.escape(k)}\b", str(exc))]
        fail(str(exc), mentioned[0] if mentioned else None)


def loads(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return _build(RunConfig, data, (), text, source)


def load(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    config = loads(path.read_text(), str(path))
    if check_paths:
        config.validate_paths()
    return config


__all__ = [
    "ConfigError", "CycleSchedule", "DatasetConfig", "LossWeights", "MetricsConfig",
    "PredictorConfig", "RunConfig", "SkipConfig", "SyntheticSpec", "TapSpec", "TrainConfig",
    "dumps", "load", "loads", "save",
]
