"""Run configuration: JSON file -> nested dataclasses, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from srvo.control import CemConfig
from srvo.policy import Widths
from srvo.scene import EnvConfig
from srvo.training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_episodes: int = 5000
    n_objects: tuple = (1, 2, 3)


@dataclass(frozen=True)
class EvalConfig:
    n_trials: int = 300
    n_objects: tuple = (2, 3)
    conditions: tuple = ("NOVEL_VP_UNSEEN_T", "NOVEL_VP_SEEN_T", "SEEN_VP_UNSEEN_T")
    chunk: int = 50
    cem: CemConfig = field(default_factory=CemConfig)


@dataclass(frozen=True)
class AdaptConfig:
    n_labels: int = 76
    steps: int = 300
    lr: float = 3e-3
    batch_size: int = 32


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = "runs/demos.srvd"
    checkpoints: str = "runs"
    reports: str = "runs/reports"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    model: Widths = field(default_factory=Widths)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            kwargs[name] = bool(value)
        elif isinstance(default, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{path}: expected an integer")
            kwargs[name] = int(value)
        elif isinstance(default, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data):
    return _build(RunConfig, data, "")


def to_dict(cfg):
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load(path=None, overrides=None, environ=None):
    """Defaults <- JSON file <- SRVO_SEED <- dotted ``overrides``."""
    data = {}
    if path:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    environ = os.environ if environ is None else environ
    if environ.get("SRVO_SEED"):
        try:
            data["seed"] = int(environ["SRVO_SEED"])
        except ValueError as exc:
            raise ConfigError(f"SRVO_SEED: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(data)


def dumps(cfg):
    return json.dumps(to_dict(cfg), sort_keys=True)
