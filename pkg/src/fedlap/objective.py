"""Composite local objectives and the optimizers that minimize them.

An objective is a sum of optional pieces over a flat parameter vector w::

    base_scale * l(w)                 data loss (summed over examples)
    + linear_scale * a^T w            linear dual term
    - 1/2 w^T diag(V) w               quadratic dual term
    + 1/2 ||w - anchor||^2_M          proximal term, diagonal metric M
    + 1/2 l2 ||w||^2                  weight decay
    + sum_j sign_j sum_i tau_i CE(yhat_i, w)   function-space terms

During minibatch training only the data loss is subsampled; every other
piece enters each step multiplied by the batch fraction so one epoch of
stochastic gradients adds up to the full-objective gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import NumericError, ShapeError
from .model import Batch, ModelSpec, _check, _nll_and_grad, diag_ggn, glm_hessian

WATCHDOG_FLOOR = -1e8


class Loss(Protocol):
    n: int

    def value_and_grad(self, w: np.ndarray, idx=None) -> tuple[float, np.ndarray]: ...

    def diag_curvature(self, w: np.ndarray) -> np.ndarray: ...

    def hessian(self, w: np.ndarray) -> np.ndarray: ...


class DataLoss:
    """Summed cross-entropy of a model on a fixed batch, with row subsetting."""

    def __init__(self, spec: ModelSpec, inputs: np.ndarray, targets: np.ndarray,
                 weights: np.ndarray | None = None):
        batch = Batch(inputs, targets, weights)
        self.spec = spec
        self.inputs = batch.inputs
        self.targets = batch.target_matrix(spec.class_count)
        self.labels = None if batch.is_soft else batch.targets.astype(np.int64)
        self.weights = np.ones(len(batch)) if batch.weights is None else batch.weights
        _check(spec, np.zeros(spec.param_count), self.inputs)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def value_and_grad(self, w: np.ndarray, idx=None) -> tuple[float, np.ndarray]:
        if idx is None:
            return _nll_and_grad(self.spec, w, self.inputs, self.targets, self.weights)
        return _nll_and_grad(self.spec, w, self.inputs[idx], self.targets[idx], self.weights[idx])

    def value(self, w: np.ndarray) -> float:
        return self.value_and_grad(w)[0]

    def diag_curvature(self, w: np.ndarray) -> np.ndarray:
        return diag_ggn(self.spec, w, self.inputs, self.weights)

    def hessian(self, w: np.ndarray) -> np.ndarray:
        return glm_hessian(self.spec, w, self.inputs, self.weights)


class FuncTerm(DataLoss):
    """sign * sum_i tau_i CE(yhat_i, w) over memory inputs with soft targets yhat."""

    def __init__(self, spec: ModelSpec, inputs: np.ndarray, soft_targets: np.ndarray,
                 tau: np.ndarray, sign: float):
        tau = np.asarray(tau, dtype=np.float64)
        if np.any(tau < 0):
            raise ValueError("tau weights must be nonnegative")
        if sign not in (1, -1, 1.0, -1.0):
            raise ValueError("sign must be +1 or -1")
        super().__init__(spec, inputs, np.asarray(soft_targets, dtype=np.float64), tau)
        self.sign = float(sign)

    def value_and_grad(self, w: np.ndarray, idx=None) -> tuple[float, np.ndarray]:
        if self.n == 0:
            return 0.0, np.zeros(self.spec.param_count)
        v, g = super().value_and_grad(w, idx)
        return self.sign * v, self.sign * g

    def diag_curvature(self, w):
        return self.sign * super().diag_curvature(w)

    def hessian(self, w):
        return self.sign * super().hessian(w)


def _vec(x, dim: int, name: str) -> np.ndarray | None:
    if x is None:
        return None
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise ShapeError(f"{name} has shape {arr.shape}, expected ({dim},)")
    return arr


@dataclass
class ObjectiveSpec:
    dim: int
    base: Loss | None = None
    base_scale: float = 1.0
    linear: np.ndarray | None = None
    linear_scale: float = 1.0
    quad_dual: np.ndarray | None = None
    prox_anchor: np.ndarray | None = None
    prox_metric: np.ndarray | float | None = None
    l2: float = 0.0
    func_terms: list[FuncTerm] = field(default_factory=list)

    def __post_init__(self):
        self.linear = _vec(self.linear, self.dim, "linear")
        self.quad_dual = _vec(self.quad_dual, self.dim, "quad_dual")
        self.prox_anchor = _vec(self.prox_anchor, self.dim, "prox_anchor")
        if self.prox_anchor is not None:
            metric = 1.0 if self.prox_metric is None else self.prox_metric
            self.prox_metric = _vec(metric, self.dim, "prox_metric")
            if np.any(self.prox_metric < 0):
                raise ValueError("prox metric entries must be nonnegative")
        if self.l2 < 0:
            raise ValueError("l2 scale must be nonnegative")
        for t in self.func_terms:
            if t.spec.param_count != self.dim:
                raise ShapeError("function-space term does not match the parameter dimension")

    def to_dict(self) -> dict:
        """JSON-friendly summary for logs (arrays as lists, the data loss by size only)."""
        lst = lambda a: None if a is None else a.tolist()
        return {
            "dim": self.dim,
            "base_examples": None if self.base is None else self.base.n,
            "base_scale": self.base_scale,
            "linear": lst(self.linear), "linear_scale": self.linear_scale,
            "quad_dual": lst(self.quad_dual),
            "prox_anchor": lst(self.prox_anchor), "prox_metric": lst(self.prox_metric),
            "l2": self.l2,
            "func_terms": [{"points": t.n, "sign": t.sign, "tau": t.weights.tolist()}
                           for t in self.func_terms],
        }


def objective_components(spec: ObjectiveSpec, w: np.ndarray, idx=None,
                         fraction: float = 1.0) -> dict[str, tuple[float, np.ndarray]]:
    """Value and gradient of every active piece, keyed by name."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.dim,):
        raise ShapeError(f"expected {spec.dim} parameters, got shape {w.shape}")
    out = {}
    if spec.base is not None:
        v, g = spec.base.value_and_grad(w, idx)
        out["base"] = (spec.base_scale * v, spec.base_scale * g)
    f = fraction
    if spec.linear is not None:
        s = spec.linear_scale * f
        out["linear"] = (s * float(spec.linear @ w), s * spec.linear)
    if spec.quad_dual is not None:
        Vw = spec.quad_dual * w
        out["quad_dual"] = (-0.5 * f * float(w @ Vw), -f * Vw)
    if spec.prox_anchor is not None:
        d = w - spec.prox_anchor
        Md = spec.prox_metric * d
        out["prox"] = (0.5 * f * float(d @ Md), f * Md)
    if spec.l2:
        out["l2"] = (0.5 * f * spec.l2 * float(w @ w), f * spec.l2 * w)
    for j, term in enumerate(spec.func_terms):
        v, g = term.value_and_grad(w)
        out[f"func[{j}]"] = (f * v, f * g)
    return out


def objective_value_and_grad(spec: ObjectiveSpec, w: np.ndarray, idx=None,
                             fraction: float = 1.0) -> tuple[float, np.ndarray]:
    parts = objective_components(spec, w, idx, fraction)
    value = 0.0
    grad = np.zeros(spec.dim)
    for v, g in parts.values():
        value += v
        grad += g
    return value, grad


def objective_hessian(spec: ObjectiveSpec, w: np.ndarray) -> np.ndarray:
    """Full Hessian; needs a base loss (and function terms) with a ``hessian`` method."""
    H = np.zeros((spec.dim, spec.dim))
    if spec.base is not None:
        H += spec.base_scale * spec.base.hessian(w)
    diag = np.zeros(spec.dim)
    if spec.quad_dual is not None:
        diag -= spec.quad_dual
    if spec.prox_anchor is not None:
        diag += spec.prox_metric
    diag += spec.l2
    H[np.diag_indices(spec.dim)] += diag
    for term in spec.func_terms:
        if term.n:
            H += term.hessian(w)
    return H


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    batch_size: int | None = None  # None means full batch
    grad_clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _fail(msg: str, spec: ObjectiveSpec, w: np.ndarray, step: int, context: dict | None):
    ctx = ", ".join(f"{k}={v}" for k, v in (context or {}).items())
    with np.errstate(all="ignore"):
        try:
            comps = {k: v for k, (v, _) in objective_components(spec, w).items()}
        except (NumericError, FloatingPointError):
            comps = "unavailable"
    where = f"{ctx}, step={step}" if ctx else f"step={step}"
    raise NumericError(f"{msg} ({where}); components: {comps}")


def minimize(spec: ObjectiveSpec, init: np.ndarray, cfg: AdamConfig,
             rng: np.random.Generator | None = None,
             callback: Callable | None = None, context: dict | None = None) -> np.ndarray:
    """Minibatch Adam from ``init`` with fresh moment estimates.

    One epoch is one pass over the base loss's examples (a single step when
    there is no base loss).  ``callback(step, w, value, grad)`` sees the
    gradient after clipping, before it is applied.
    """
    w = np.array(init, dtype=np.float64)
    if w.shape != (spec.dim,):
        raise ShapeError(f"expected {spec.dim} parameters, got shape {w.shape}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n = spec.base.n if spec.base is not None else 1
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    m = np.zeros_like(w)
    s = np.zeros_like(w)
    b1, b2 = cfg.beta1, cfg.beta2
    step = 0
    for _ in range(cfg.epochs):
        if bs < n:
            order = rng.permutation(n)
            batches = [order[i:i + bs] for i in range(0, n, bs)]
        else:
            batches = [None]
        for idx in batches:
            frac = 1.0 if idx is None else len(idx) / n
            try:
                value, g = objective_value_and_grad(spec, w, idx, frac)
            except NumericError as exc:
                _fail(str(exc), spec, w, step, context)
            if not (np.isfinite(value) and np.all(np.isfinite(g))):
                _fail("non-finite objective or gradient", spec, w, step, context)
            if value < WATCHDOG_FLOOR:
                _fail(f"objective fell below {WATCHDOG_FLOOR:g}", spec, w, step, context)
            if cfg.grad_clip_norm is not None:
                norm = float(np.linalg.norm(g))
                if norm > cfg.grad_clip_norm:
                    g = g * (cfg.grad_clip_norm / norm)
            if callback is not None:
                callback(step, w, value, g)
            step += 1
            m = b1 * m + (1 - b1) * g
            s = b2 * s + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** step)
            s_hat = s / (1 - b2 ** step)
            w = w - cfg.learning_rate * m_hat / (np.sqrt(s_hat) + cfg.eps)
    return w


def solve_exact(spec: ObjectiveSpec, init: np.ndarray, tol: float = 1e-12,
                max_iter: int = 100) -> np.ndarray:
    """Damped Newton's method to (near) machine precision.

    Used for oracle checks where the local problem has to be solved exactly.
    A Levenberg shift is added whenever the Hessian is not positive definite.
    """
    w = np.array(init, dtype=np.float64)
    value, g = objective_value_and_grad(spec, w)
    for _ in range(max_iter):
        if np.max(np.abs(g)) <= tol:
            break
        H = objective_hessian(spec, w)
        shift = 0.0
        while True:
            try:
                L = np.linalg.cholesky(H + shift * np.eye(spec.dim))
                break
            except np.linalg.LinAlgError:
                shift = max(2 * shift, 1e-8 * max(1.0, np.abs(H).max()))
        p = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        t, slope = 1.0, float(g @ p)
        while t > 1e-12:
            new_w = w + t * p
            new_value, new_g = objective_value_and_grad(spec, new_w)
            if new_value <= value + 1e-4 * t * slope + 1e-14 * abs(value):
                break
            t *= 0.5
        else:
            break
        if np.max(np.abs(new_w - w)) == 0.0:
            break
        w, value, g = new_w, new_value, new_g
    return w
