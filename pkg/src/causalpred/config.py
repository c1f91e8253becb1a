"""Run configuration: a JSON document with a schema version and strictly checked keys."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SCHEMA = "causalpred.config/1"


class ConfigError(ValueError):
    pass


@dataclass
class TaskBlock:
    name: str = "indexing"
    options: dict = field(default_factory=dict)


@dataclass
class ModelBlock:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_seq_len: int = 24


@dataclass
class TrainBlock:
    steps: int = 1500
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    eval_size: int = 2048


@dataclass
class PlantBlock:
    kind: str = "chain"
    options: dict = field(default_factory=dict)


@dataclass
class LocalizeBlock:
    model: str = ""
    variable: str = ""
    layers: list = field(default_factory=lambda: [0, 1, 2])
    selectors: list = field(default_factory=lambda: ["name_c", "last"])
    d_subs: list = field(default_factory=lambda: [1, 2])
    steps: int = 300
    batch: int = 64
    lr: float = 1e-2
    n_pairs: int = 2000
    val_fraction: float = 0.1
    route: str = "source-input"
    n_verified: int = 512
    checkpoint_every: int = 25


@dataclass
class PredictorBlock:
    variant: str = ""
    n: int = 1
    temperature: float = 1.0
    k: int = 16
    layer: Any = None
    selector: str = "last"
    project: bool = True
    route: str = "source-input"


@dataclass
class PredictBlock:
    model: str = ""
    alignment: str = ""
    predictors: list = field(default_factory=list)
    tag: str = "ID"
    n: int = 256
    n_train: int = 512
    n_verified: int = 256


@dataclass
class EvalBlock:
    model: str = ""
    alignment: str = ""
    predictors: list = field(default_factory=list)
    tags: list = field(default_factory=list)
    folds: int = 3
    n_train: int = 512
    n_test: int = 256
    n_verified: int = 256


@dataclass
class SweepBlock:
    model: str = ""
    alignment: str = ""
    tags: list = field(default_factory=list)
    n_test: int = 256
    n_pairs: int = 1000
    n_verified: int = 256
    k: int = 16
    route: str = "source-input"


@dataclass
class ReportBlock:
    eval: str = ""
    sweep: str = ""
    localize: str = ""


@dataclass
class RunConfig:
    schema: str = SCHEMA
    seed: int = 0
    store: str = ""
    task: TaskBlock = field(default_factory=TaskBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    plant: PlantBlock = field(default_factory=PlantBlock)
    localize: LocalizeBlock = field(default_factory=LocalizeBlock)
    predict: PredictBlock = field(default_factory=PredictBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    report: ReportBlock = field(default_factory=ReportBlock)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_scalar(value, typ, where: str):
    if typ is Any:
        return value
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if not isinstance(value, typ):
        raise ConfigError(f"{where}: expected {typ.__name__}, got {type(value).__name__} {value!r}")
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        typ = hints[k]
        path = f"{where}.{k}" if where else k
        if dataclasses.is_dataclass(typ):
            kwargs[k] = _build(typ, v, path)
        elif k == "predictors":
            if not isinstance(v, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[k] = [dataclasses.asdict(_build(PredictorBlock, p, f"{path}[{i}]")) for i, p in enumerate(v)]
        else:
            origin = typing.get_origin(typ) or typ
            kwargs[k] = _check_scalar(v, origin, path)
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    schema = data.get("schema")
    if schema != SCHEMA:
        raise ConfigError(f"unsupported or missing schema {schema!r}; expected {SCHEMA!r}")
    return _build(RunConfig, data, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    return parse_config(data)
