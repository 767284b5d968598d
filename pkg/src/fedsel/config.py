"""Experiment configuration: dataclasses, strict JSON parsing and echo."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import GeneratorParams
from .exceptions import ConfigError
from .model import INIT_SCHEMES
from .selection import StrategyConfig
from .training import AGGREGATION_MODES, SgdParams


@dataclass(frozen=True)
class ModelInit:
    scheme: str = "zeros"
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.scheme!r}")


@dataclass(frozen=True)
class TestSetParams:
    per_class_count: int = 200
    excluded_client_ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "excluded_client_ids", tuple(self.excluded_client_ids))
        if self.per_class_count < 1:
            raise ConfigError("per_class_count must be >= 1")


@dataclass(frozen=True)
class GridSearchParams:
    rounds: int = 10
    metrics: tuple = ("cosine", "euclidean", "manhattan")
    linkages: tuple = ("single", "complete", "average")
    k_values: tuple = (2, 3, 4, 5, 6)

    def __post_init__(self):
        for name in ("metrics", "linkages", "k_values"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.rounds < 1:
            raise ConfigError("gridsearch.rounds must be >= 1")


@dataclass(frozen=True)
class TimingParams:
    repetitions: int = 50
    select: int = 10

    def __post_init__(self):
        if self.repetitions < 10:
            raise ConfigError("timing.repetitions must be >= 10")
        if self.select < 1:
            raise ConfigError("timing.select must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    partition_spec: str
    strategy: StrategyConfig
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    model: ModelInit = field(default_factory=ModelInit)
    sgd: SgdParams = field(default_factory=SgdParams)
    total_rounds: int = 200
    moving_average_window: int = 5
    aggregation: str = "sample_weighted"
    test_set: TestSetParams = field(default_factory=TestSetParams)
    seed: int = 0
    record_selection_time: bool = False
    name: str = ""
    timing: TimingParams = field(default_factory=TimingParams)
    gridsearch: GridSearchParams = field(default_factory=GridSearchParams)

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be >= 1")
        if self.moving_average_window < 1:
            raise ConfigError("moving_average_window must be >= 1")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(f"unknown aggregation mode {self.aggregation!r}")

    @property
    def run_name(self) -> str:
        return self.name or self.strategy.label

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every seed (data, init, shuffling, selection) set to ``seed``."""
        return dataclasses.replace(
            self,
            seed=seed,
            generator=dataclasses.replace(self.generator, seed=seed),
            model=dataclasses.replace(self.model, seed=seed),
            sgd=dataclasses.replace(self.sgd, shuffle_seed=seed),
        )


_SECTIONS = {
    "strategy": StrategyConfig,
    "generator": GeneratorParams,
    "model": ModelInit,
    "sgd": SgdParams,
    "test_set": TestSetParams,
    "timing": TimingParams,
    "gridsearch": GridSearchParams,
}

_FLOAT_FIELDS = {"fraction", "class_separation", "group_shift", "noise_sigma", "learning_rate"}


def _check_type(path: str, value, annotation: str):
    """Light type check driven by the dataclass annotation strings."""
    ann = annotation.replace(" ", "")
    name = path.rsplit(".", 1)[-1]
    if value is None and "None" in ann:
        return value
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif ann.startswith("float") or name in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    elif ann.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif ann.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif ann.startswith("tuple"):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
    elif ann.startswith("dict"):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"unknown config key '{prefix}{unknown[0]}'")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key in _SECTIONS and cls is ExperimentConfig:
            kwargs[key] = _build(_SECTIONS[key], value, sub)
        else:
            kwargs[key] = _check_type(sub, value, str(fields[key].type))
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    for required in ("partition_spec", "strategy"):
        if required not in data:
            raise ConfigError(f"missing required config key '{required}'")
    return _build(ExperimentConfig, data, "")


def config_to_dict(config: ExperimentConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        return obj

    return convert(config)


def emit_config(config: ExperimentConfig) -> str:
    """Fully resolved config as JSON, every default spelled out."""
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"


def parse_config(path) -> ExperimentConfig:
    """Read and validate a JSON experiment config.

    A relative ``partition_spec`` path resolves against the config file's
    directory; shipped names (``table1``, ``table2``, ``newcomers``) pass through.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    config = config_from_dict(data)
    spec = Path(config.partition_spec)
    if not spec.is_absolute() and (path.parent / spec).exists():
        config = dataclasses.replace(config, partition_spec=str(path.parent / spec))
    return config
