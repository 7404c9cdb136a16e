"""Flat-parameter GLM and MLP classifiers with analytic gradients and curvature.

Every model maps inputs to class logits and is trained with (soft-target)
cross-entropy.  Parameters live in a single flat float64 vector so that the
federated algorithms can treat them as plain vectors.

Layout of the flat vector:

* ``logistic-binary``: ``[w_1 .. w_d, (b)]``
* ``softmax-linear``: ``W`` (C x d, row major) followed by ``b`` (C)
* ``mlp``: for each layer, ``W`` (out x in, row major) followed by ``b`` (out)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError

KINDS = ("logistic-binary", "softmax-linear", "mlp")
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    class_count: int = 2
    hidden_sizes: tuple[int, ...] = (200, 100)
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.kind == "logistic-binary" and self.class_count != 2:
            raise ValueError("logistic-binary requires class_count == 2")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    @property
    def is_glm(self) -> bool:
        return self.kind != "mlp"

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) for every affine layer, first to last."""
        if self.kind == "logistic-binary":
            return [(1, self.input_dim)]
        if self.kind == "softmax-linear":
            return [(self.class_count, self.input_dim)]
        sizes = [self.input_dim, *self.hidden_sizes, self.class_count]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def param_count(self) -> int:
        has_bias = self.bias or self.kind == "mlp"
        return sum(o * i + (o if has_bias else 0) for o, i in self.layer_shapes())

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "input_dim": self.input_dim, "class_count": self.class_count,
             "bias": self.bias}
        if self.kind == "mlp":
            d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if "hidden_sizes" in d:
            d["hidden_sizes"] = tuple(d["hidden_sizes"])
        return cls(**d)


@dataclass
class Batch:
    """Inputs with hard (class index) or soft (row-stochastic) targets."""

    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.asarray(self.targets)
        n = self.inputs.shape[0]
        if self.targets.shape[0] != n:
            raise ShapeError(f"{n} inputs but {self.targets.shape[0]} targets")
        if self.targets.ndim == 2:
            self.targets = self.targets.astype(np.float64)
            if n and not np.allclose(self.targets.sum(axis=1), 1.0, rtol=0, atol=1e-9):
                raise ValueError("soft-label rows must sum to 1")
        elif self.targets.ndim != 1:
            raise ShapeError("targets must be a label vector or an n x C matrix")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (n,):
                raise ShapeError("weights must have one entry per example")
            if np.any(self.weights < 0):
                raise ValueError("example weights must be nonnegative")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_soft(self) -> bool:
        return self.targets.ndim == 2

    def target_matrix(self, class_count: int) -> np.ndarray:
        if self.is_soft:
            if self.targets.shape[1] != class_count:
                raise ShapeError(f"soft labels have {self.targets.shape[1]} columns, expected {class_count}")
            return self.targets
        labels = self.targets.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            raise ValueError(f"labels must lie in [0, {class_count})")
        out = np.zeros((labels.shape[0], class_count))
        out[np.arange(labels.shape[0]), labels] = 1.0
        return out

    def subset(self, idx) -> "Batch":
        w = None if self.weights is None else self.weights[idx]
        return Batch(self.inputs[idx], self.targets[idx], w)


def _check(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    params = np.asarray(params, dtype=np.float64)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if params.shape != (spec.param_count,):
        raise ShapeError(f"expected {spec.param_count} parameters, got shape {params.shape}")
    if inputs.shape[1] != spec.input_dim:
        raise ShapeError(f"expected input width {spec.input_dim}, got {inputs.shape[1]}")
    return params, inputs


def unpack(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Views of the flat vector as per-layer (W, b) pairs."""
    has_bias = spec.bias or spec.kind == "mlp"
    layers, pos = [], 0
    for out, inp in spec.layer_shapes():
        W = params[pos:pos + out * inp].reshape(out, inp)
        pos += out * inp
        b = None
        if has_bias:
            b = params[pos:pos + out]
            pos += out
        layers.append((W, b))
    return layers


def _pack(layer_grads: list[tuple[np.ndarray, np.ndarray | None]]) -> np.ndarray:
    parts = []
    for gW, gb in layer_grads:
        parts.append(gW.ravel())
        if gb is not None:
            parts.append(gb)
    return np.concatenate(parts)


def _forward(spec: ModelSpec, params: np.ndarray, X: np.ndarray):
    """Logits plus the activations needed for backprop."""
    layers = unpack(spec, params)
    acts, pre = [X], []
    a = X
    for li, (W, b) in enumerate(layers):
        z = a @ W.T
        if b is not None:
            z = z + b
        pre.append(z)
        if li < len(layers) - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)
    return pre[-1], acts, pre, layers


def _proba_from_logits(spec: ModelSpec, logits: np.ndarray) -> np.ndarray:
    if spec.kind == "logistic-binary":
        p = expit(logits[:, 0])
        return np.stack([1.0 - p, p], axis=1)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per input."""
    params, X = _check(spec, params, inputs)
    if X.shape[0] == 0:
        return np.zeros((0, spec.class_count))
    logits = _forward(spec, params, X)[0]
    return _proba_from_logits(spec, logits)


def soft_label(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Predictions kept at full precision for use as cross-entropy targets."""
    return predict_proba(spec, params, inputs)


def predict(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index on ties
    return np.argmax(predict_proba(spec, params, inputs), axis=1)


def _raise_nonfinite(values: np.ndarray, what: str):
    bad = np.flatnonzero(~np.isfinite(values))
    raise NumericError(f"non-finite {what} at example index {int(bad[0])}")


def nll_and_grad(spec: ModelSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Summed (weighted) cross-entropy and its exact gradient.

    Probabilities are clamped to [1e-12, 1 - 1e-12] inside the log; the
    gradient is that of the unclamped loss, so the two only disagree for
    predictions already saturated past the clamp.
    """
    params, X = _check(spec, params, batch.inputs)
    if X.shape[0] == 0:
        raise ShapeError("empty batch")
    T = batch.target_matrix(spec.class_count)
    wts = np.ones(X.shape[0]) if batch.weights is None else batch.weights
    return _nll_and_grad(spec, params, X, T, wts)


def _nll_and_grad(spec: ModelSpec, params: np.ndarray, X: np.ndarray, T: np.ndarray,
                  wts: np.ndarray) -> tuple[float, np.ndarray]:
    # unchecked core, called once per optimizer step
    logits, acts, pre, layers = _forward(spec, params, X)
    P = _proba_from_logits(spec, logits)
    logp = np.log(np.clip(P, PROB_CLAMP, 1.0 - PROB_CLAMP))
    per_example = -(T * logp).sum(axis=1)
    if not np.all(np.isfinite(per_example)):
        _raise_nonfinite(per_example, "loss")
    loss = float(wts @ per_example)

    resid = (P - T) * wts[:, None]
    if spec.kind == "logistic-binary":
        dz = resid[:, 1:2]
    else:
        dz = resid
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, b = layers[li]
        a = acts[li]
        gW = dz.T @ a
        gb = dz.sum(axis=0) if b is not None else None
        grads.append((gW, gb))
        if li > 0:
            dz = (dz @ W) * (pre[li - 1] > 0)
    grad = _pack(grads[::-1])
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return loss, grad


def mean_nll(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    loss, _ = nll_and_grad(spec, params, Batch(inputs, labels))
    return loss / len(labels)


def accuracy(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(spec, params, inputs) == np.asarray(labels)))


def _output_curvature(spec: ModelSpec, P: np.ndarray) -> np.ndarray:
    """Per-example Hessian of cross-entropy w.r.t. the logits, n x L x L."""
    if spec.kind == "logistic-binary":
        p = P[:, 1]
        return (p * (1.0 - p))[:, None, None]
    return np.einsum("ic,cd->icd", P, np.eye(P.shape[1])) - P[:, :, None] * P[:, None, :]


def diag_ggn(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray,
             weights: np.ndarray | None = None, chunk: int = 2048) -> np.ndarray:
    """Diagonal of the Generalised Gauss-Newton matrix sum_i J_i^T Lambda_i J_i.

    Exact for every model kind.  For each weight the diagonal entry equals the
    variance of the logit Jacobian column under the predictive distribution,
    so it is nonnegative by construction.
    """
    params, X = _check(spec, params, inputs)
    out = np.zeros(spec.param_count)
    n = X.shape[0]
    if n == 0:
        return out
    wts = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        out += _diag_ggn_chunk(spec, params, X[sl], wts[sl])
    return out


def _diag_ggn_chunk(spec, params, X, wts):
    logits, acts, pre, layers = _forward(spec, params, X)
    P = _proba_from_logits(spec, logits)
    has_bias = layers[0][1] is not None
    if spec.kind == "logistic-binary":
        lam = P[:, 1] * (1.0 - P[:, 1]) * wts
        gW = lam @ (X * X)
        parts = [gW, [lam.sum()]] if has_bias else [gW]
        return np.concatenate(parts)
    if spec.kind == "softmax-linear":
        lam = P * (1.0 - P) * wts[:, None]
        gW = lam.T @ (X * X)
        parts = [gW.ravel(), lam.sum(axis=0)] if has_bias else [gW.ravel()]
        return np.concatenate(parts)

    # mlp: backprop every class's unit vector through the network at once.
    n, C = P.shape
    delta = np.broadcast_to(np.eye(C), (n, C, C))  # [example, class, unit]
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        mean = np.einsum("ic,icu->iu", P, delta)
        second = np.einsum("ic,icu->iu", P, delta * delta)
        var = np.maximum(second - mean * mean, 0.0) * wts[:, None]
        a = acts[li]
        grads.append((var.T @ (a * a), var.sum(axis=0)))
        if li > 0:
            delta = (delta @ W) * (pre[li - 1] > 0)[:, None, :]
    return _pack(grads[::-1])


def glm_hessian(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray,
                weights: np.ndarray | None = None) -> np.ndarray:
    """Full P x P Hessian of the summed cross-entropy for a GLM.

    With a canonical link this equals the GGN and does not depend on targets.
    """
    if not spec.is_glm:
        raise ValueError("full Hessian is only available for GLMs")
    params, X = _check(spec, params, inputs)
    n = X.shape[0]
    Pdim = spec.param_count
    if n == 0:
        return np.zeros((Pdim, Pdim))
    wts = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    logits = _forward(spec, params, X)[0]
    P = _proba_from_logits(spec, logits)
    lam = _output_curvature(spec, P) * wts[:, None, None]  # n x L x L
    Xa = np.hstack([X, np.ones((n, 1))]) if spec.bias else X
    L = lam.shape[1]
    d = Xa.shape[1]
    # H[(c, j), (c', j')] = sum_i lam[i, c, c'] x_ij x_ij'
    H = np.einsum("icd,ij,ik->cjdk", lam, Xa, Xa).reshape(L * d, L * d)
    if not spec.bias:
        return H
    # reorder from per-class [W_c, b_c] blocks to [W (row major), b]
    order = [c * d + j for c in range(L) for j in range(d - 1)] + [c * d + d - 1 for c in range(L)]
    return H[np.ix_(order, order)]


def init_params(spec: ModelSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Zeros for GLMs; fan-in scaled uniform weights and zero biases for MLPs."""
    if spec.is_glm:
        return np.zeros(spec.param_count)
    rng = rng if rng is not None else np.random.default_rng(0)
    parts = []
    for out, inp in spec.layer_shapes():
        bound = 1.0 / np.sqrt(inp)
        parts.append(rng.uniform(-bound, bound, size=out * inp))
        parts.append(np.zeros(out))
    return np.concatenate(parts)
