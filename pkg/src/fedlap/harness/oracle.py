"""Centralized training on the pooled shards: the target every federated run chases."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..data import quadratic_optimum
from ..model import accuracy, mean_nll
from ..objective import AdamConfig, DataLoss, ObjectiveSpec, minimize, solve_exact
from .config import ExperimentConfig
from .problem import Problem, build_problem


@dataclass
class OracleResult:
    w: np.ndarray
    delta: float
    train_nll: float
    test_nll: float | None = None
    test_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {"delta": self.delta, "train_nll": self.train_nll, "test_nll": self.test_nll,
                "test_accuracy": self.test_accuracy, "param_count": len(self.w)}


def centralized_oracle(cfg: ExperimentConfig, seed: int | None = None, delta: float | None = None,
                       problem: Problem | None = None, per_example: bool = False,
                       adam: AdamConfig | None = None) -> OracleResult:
    """argmin_w sum_k l_k(w) + 0.5 delta ||w||^2 over the union of the client shards.

    Quadratics use the normal equations.  GLMs use a Newton solve; MLPs are trained
    with Adam (``adam``, default the config's local optimizer) from the run's initial
    weights.  ``per_example`` divides every client loss by its size first, the
    objective the FedAvg family optimizes.
    """
    seed = cfg.seeds[0] if seed is None else seed
    problem = problem if problem is not None else build_problem(cfg, seed)
    delta = cfg.strategy_config.delta if delta is None else float(delta)
    if problem.is_quadratic:
        w = quadratic_optimum(problem.shards, delta, per_example=per_example)
        return OracleResult(w=w, delta=delta, train_nll=problem.evaluate(w)["train_nll"])

    model = problem.model
    X, y = problem.union()
    if per_example:
        weights = np.concatenate([np.full(s.n, 1.0 / s.n) for s in problem.shards])
    else:
        weights = None
    base = DataLoss(model, X, y, weights)
    obj = ObjectiveSpec(dim=problem.dim, base=base, l2=delta)
    if model.is_glm:
        w = solve_exact(obj, np.zeros(problem.dim))
    else:
        opt = adam if adam is not None else cfg.local_config
        w = minimize(obj, problem.w0, replace(opt, seed=seed))
    out = OracleResult(w=w, delta=delta, train_nll=mean_nll(model, w, X, y))
    if problem.test is not None and len(problem.test[1]):
        Xt, yt = problem.test
        out.test_nll = mean_nll(model, w, Xt, yt)
        out.test_accuracy = accuracy(model, w, Xt, yt)
    return out
