"""Turn an ExperimentConfig and a seed into client shards, a Setup and an initial model.

Both ends of a TCP session call ``build_problem`` with the same config and seed,
so shards and the memory set agree without being sent over the wire.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..data import (CsvSchema, Dataset, QuadraticClientsSpec, QuadraticLoss, SplitSpec,
                    generate_synthetic, load_csv, load_idx, load_uci_credit, make_split,
                    quadratic_clients, rescaled, stratified_holdout)
from ..data.datasets import find_idx_files
from ..errors import ConfigError
from ..model import ModelSpec, accuracy, init_params, mean_nll
from ..objective import DataLoss
from ..strategies import Setup, build_memory
from .config import ExperimentConfig

# RNG stream tags under a run seed; client streams are keyed (seed, CLIENT_STREAM, client, round)
SPLIT_STREAM, MEMORY_STREAM, INIT_STREAM, CLIENT_STREAM, SUBSAMPLE_STREAM = 1, 2, 3, 4, 5


def client_rng(seed: int, client_id: int, round_: int) -> np.random.Generator:
    return np.random.default_rng([seed, CLIENT_STREAM, client_id, round_])


@dataclass
class Problem:
    shards: list
    setup: Setup
    w0: np.ndarray
    model: ModelSpec | None = None
    test: tuple[np.ndarray, np.ndarray] | None = None
    dataset: Dataset | None = None

    @property
    def dim(self) -> int:
        return len(self.w0)

    @property
    def clients(self) -> int:
        return len(self.shards)

    @property
    def is_quadratic(self) -> bool:
        return self.model is None

    def union(self) -> tuple[np.ndarray, np.ndarray]:
        """Pooled training inputs and labels of all shards, in client order."""
        X = np.concatenate([s.inputs for s in self.shards])
        y = np.concatenate([s.labels for s in self.shards])
        return X, y

    def evaluate(self, w: np.ndarray) -> dict:
        """Metrics at w; reads only, never mutates."""
        losses = [float(s.value(w)) for s in self.shards]
        sizes = self.setup.sizes
        out = {
            "test_accuracy": None,
            "test_nll": None,
            "train_nll": sum(losses) / float(sum(sizes)),
            "client_losses": [loss / n for loss, n in zip(losses, sizes)],
        }
        if self.test is not None and len(self.test[1]):
            Xt, yt = self.test
            out["test_accuracy"] = accuracy(self.model, w, Xt, yt)
            out["test_nll"] = mean_nll(self.model, w, Xt, yt)
        return out


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    params = dict(ds.params)
    if ds.kind == "uci-credit":
        data = load_uci_credit(ds.path, test_fraction=ds.test_fraction, seed=ds.seed)
    elif ds.kind == "csv":
        params.setdefault("test_fraction", ds.test_fraction)
        params.setdefault("seed", ds.seed)
        for key in ("categorical_columns", "ignore_columns", "label_values"):
            if key in params and params[key] is not None:
                params[key] = tuple(params[key])
        data = load_csv(ds.path, CsvSchema(**params), name=cfg.name)
    elif ds.kind == "idx":
        files = find_idx_files(ds.path, params.pop("prefix", ""))
        data = load_idx(files["train_images"], files["train_labels"], files["test_images"],
                        files["test_labels"], class_count=params.pop("class_count", 10))
    elif ds.kind == "gaussian-blobs":
        params.setdefault("test_fraction", ds.test_fraction)
        data = generate_synthetic("gaussian-blobs", params, np.random.default_rng(ds.seed))
    else:
        raise ConfigError(f"dataset kind {ds.kind!r} does not produce a labelled dataset")
    return data


def _quadratic_problem(cfg: ExperimentConfig) -> Problem:
    params = dict(cfg.dataset.params)
    per_row = bool(params.pop("rescale_by_rows", False))
    params.setdefault("clients", cfg.split.clients)
    try:
        spec = QuadraticClientsSpec(**params)
    except TypeError as e:
        raise ConfigError(f"dataset.params: {e}") from None
    losses: list[QuadraticLoss] = quadratic_clients(spec, np.random.default_rng(cfg.dataset.seed))
    if per_row:
        # the same problem with l_k / N_k equal to the unscaled l_k
        losses = [rescaled(loss, loss.n) for loss in losses]
    setup = Setup(sizes=tuple(loss.n for loss in losses))
    return Problem(shards=losses, setup=setup, w0=np.zeros(spec.dim))


def resolve_model(cfg: ExperimentConfig, data: Dataset) -> ModelSpec:
    m = cfg.model
    return ModelSpec(kind=m.kind, input_dim=m.input_dim or data.input_dim,
                     class_count=m.class_count or data.class_count,
                     hidden_sizes=tuple(m.hidden_sizes), bias=m.bias)


def build_problem(cfg: ExperimentConfig, seed: int, data: Dataset | None = None) -> Problem:
    if cfg.dataset.kind == "quadratic-clients":
        return _quadratic_problem(cfg)
    data = data if data is not None else load_dataset(cfg)
    if cfg.dataset.fraction < 1.0:
        # a fresh stratified subsample of the training set for every run seed
        _, keep = stratified_holdout(data.train_labels, cfg.dataset.fraction,
                                     np.random.default_rng([seed, SUBSAMPLE_STREAM]))
        data = replace(data, train_inputs=data.train_inputs[keep], train_labels=data.train_labels[keep])
    model = resolve_model(cfg, data)
    if model.input_dim != data.input_dim:
        raise ConfigError(f"model.input_dim {model.input_dim} but the data has {data.input_dim} features")
    sp = cfg.split
    shards_spec = tuple(tuple(s) for s in sp.shards) if sp.shards is not None else None
    split = make_split(data.train_labels,
                       SplitSpec(kind=sp.kind, clients=sp.clients, alpha1=sp.alpha1, alpha2=sp.alpha2,
                                 seed=seed, shards=shards_spec),
                       np.random.default_rng([seed, SPLIT_STREAM]), data.class_count)
    Xs = [data.train_inputs[idx] for idx in split.shards]
    ys = [data.train_labels[idx] for idx in split.shards]
    shards = [DataLoss(model, X, y) for X, y in zip(Xs, ys)]
    strategy = cfg.strategy_config
    memory = None
    if strategy.algorithm == "fedlap-func":
        memory = build_memory(Xs, ys, model.class_count, strategy.memory_per_class, strategy.tau_f,
                              np.random.default_rng([seed, MEMORY_STREAM]))
    setup = Setup(sizes=tuple(len(y) for y in ys), model=model, memory=memory)
    w0 = init_params(model, np.random.default_rng([seed, INIT_STREAM]))
    return Problem(shards=shards, setup=setup, w0=w0, model=model,
                   test=(data.test_inputs, data.test_labels), dataset=data)
