"""Experiment configuration: JSON loading, dotted overrides and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..model import KINDS as MODEL_KINDS
from ..objective import AdamConfig
from ..strategies import StrategyConfig
from ..data.splits import SPLIT_KINDS

DATASET_KINDS = ("uci-credit", "csv", "idx", "quadratic-clients", "gaussian-blobs")
TRANSPORTS = ("inproc", "tcp")


@dataclass
class DatasetConfig:
    kind: str = "uci-credit"
    path: str | None = None  # csv file, idx directory, or crx.data override
    test_fraction: float = 0.2
    seed: int = 0  # holdout split and synthetic generator
    fraction: float = 1.0  # stratified subsample of the training set
    params: dict = field(default_factory=dict)  # generator params, csv schema or idx prefix


@dataclass
class SplitConfig:
    kind: str = "homogeneous"
    clients: int = 10
    alpha1: float = 1.0
    alpha2: float = 0.5
    shards: list | None = None


@dataclass
class ModelConfig:
    """Model family; input_dim and class_count come from the data when left at None."""

    kind: str = "logistic-binary"
    hidden_sizes: list = field(default_factory=lambda: [200, 100])
    bias: bool = True
    input_dim: int | None = None
    class_count: int | None = None


@dataclass
class TransportConfig:
    kind: str = "inproc"
    host: str = "127.0.0.1"
    port: int = 0
    timeout: float = 30.0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: dict = field(default_factory=dict)
    local: dict = field(default_factory=lambda: {"learning_rate": 1e-3})
    rounds: int = 10
    seeds: list = field(default_factory=lambda: [0])
    eval_every: int = 1
    output: str = "results"
    transport: TransportConfig = field(default_factory=TransportConfig)
    timing: bool = False

    # resolved views
    @property
    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig.from_dict(self.strategy)

    @property
    def local_config(self) -> AdamConfig:
        return AdamConfig(**self.local)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = _build(cls, d, "")
        validate(cfg)
        return cfg


_NESTED = {"dataset": DatasetConfig, "split": SplitConfig, "model": ModelConfig,
           "transport": TransportConfig}
# free-form dicts whose keys come from another schema
_SCHEMAS = {"strategy": StrategyConfig, "local": AdamConfig, "strategy.server_opt": AdamConfig}


def _field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _build(cls, d: Any, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object, got {type(d).__name__}")
    names = _field_names(cls)
    unknown = sorted(set(d) - set(names))
    if unknown:
        where = prefix or "top level"
        raise ConfigError(f"unknown key(s) {unknown} at {where}; valid keys: {names}")
    kwargs = {}
    for name, value in d.items():
        path = f"{prefix}{name}"
        if path in _NESTED:
            kwargs[name] = _build(_NESTED[path], value, path + ".")
        elif path in _SCHEMAS:
            kwargs[name] = _check_schema(path, value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _check_schema(path: str, value) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path} must be an object")
    names = _field_names(_SCHEMAS[path])
    unknown = sorted(set(value) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {path}; valid keys: {names}")
    if path == "strategy" and isinstance(value.get("server_opt"), dict):
        _check_schema("strategy.server_opt", value["server_opt"])
    return dict(value)


def valid_keys(cfg: ExperimentConfig | None = None) -> list[str]:
    """Every dotted key an override may target."""
    out = []

    def walk(cls, prefix):
        for f in fields(cls):
            path = prefix + f.name
            if path in _NESTED:
                walk(_NESTED[path], path + ".")
            elif path in _SCHEMAS:
                walk(_SCHEMAS[path], path + ".")
            else:
                out.append(path)
    walk(ExperimentConfig, "")
    return out


def validate(cfg: ExperimentConfig) -> None:
    """Collect every problem, then raise one ConfigError listing them all."""
    problems = []
    ds, sp, m = cfg.dataset, cfg.split, cfg.model
    if ds.kind not in DATASET_KINDS:
        problems.append(f"dataset.kind {ds.kind!r} not in {DATASET_KINDS}")
    if ds.kind in ("csv", "idx") and not ds.path:
        problems.append(f"dataset.path is required for kind {ds.kind!r}")
    if not 0 < ds.fraction <= 1:
        problems.append("dataset.fraction must lie in (0, 1]")
    if not 0 < ds.test_fraction < 1:
        problems.append("dataset.test_fraction must lie in (0, 1)")
    if sp.kind not in SPLIT_KINDS:
        problems.append(f"split.kind {sp.kind!r} not in {SPLIT_KINDS}")
    if not isinstance(sp.clients, int) or sp.clients < 1:
        problems.append("split.clients must be a positive integer")
    if m.kind not in MODEL_KINDS:
        problems.append(f"model.kind {m.kind!r} not in {MODEL_KINDS}")
    if cfg.transport.kind not in TRANSPORTS:
        problems.append(f"transport.kind {cfg.transport.kind!r} not in {TRANSPORTS}")
    if not isinstance(cfg.rounds, int) or cfg.rounds < 0:
        problems.append("rounds must be a nonnegative integer")
    if not isinstance(cfg.eval_every, int) or cfg.eval_every < 1:
        problems.append("eval_every must be a positive integer")
    if not cfg.seeds or not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
        problems.append("seeds must be a nonempty list of nonnegative integers")
    elif len(set(cfg.seeds)) != len(cfg.seeds):
        problems.append("seeds must be distinct")

    strat = None
    try:
        strat = cfg.strategy_config
    except (TypeError, ValueError) as e:
        problems.append(f"strategy: {e}")
    try:
        cfg.local_config
    except (TypeError, ValueError) as e:
        problems.append(f"local: {e}")

    if strat is not None:
        quadratic = ds.kind == "quadratic-clients"
        if strat.algorithm == "fedlap-func":
            if quadratic:
                problems.append("fedlap-func needs a classification model; quadratic-clients has none")
            if strat.memory_per_class < 1:
                problems.append("fedlap-func needs strategy.memory_per_class >= 1")
        # every model kind and the quadratic testbed supply diagonal curvature, so
        # fedlap-cov only needs the model kind check above
        if strat.local_solver == "exact" and not quadratic and m.kind == "mlp":
            problems.append("exact local solves need a convex model (GLM or quadratic)")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings to a config dict, rejecting unknown keys."""
    d = json.loads(json.dumps(d))
    keys = valid_keys()
    free_prefixes = ("dataset.params.",)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in keys and not key.startswith(free_prefixes):
            raise ConfigError(f"unknown key {key!r}; valid keys: {keys}")
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key!r}: {p} is not an object")
        node[parts[-1]] = parse_value(raw)
    return d


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return ExperimentConfig.from_dict(apply_overrides(d, overrides or []))


def config_from(obj) -> ExperimentConfig:
    if isinstance(obj, ExperimentConfig):
        return obj
    if is_dataclass(obj):
        obj = asdict(obj)
    return ExperimentConfig.from_dict(obj)
