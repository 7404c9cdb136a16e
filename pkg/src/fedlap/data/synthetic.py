"""Synthetic testbeds: least-squares clients with closed-form optima, and Gaussian blobs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from .datasets import Dataset, stratified_holdout

SYNTHETIC_KINDS = ("quadratic-clients", "gaussian-blobs")


class QuadraticLoss:
    """l(w) = 0.5 * ||A w - b||^2, summed over the rows of A."""

    def __init__(self, A: np.ndarray, b: np.ndarray):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ShapeError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        if A.shape[0] == 0 or A.shape[1] == 0:
            raise ShapeError("quadratic loss needs at least one row and one column")
        self.A, self.b = A, b
        self._AtA = A.T @ A

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def value_and_grad(self, w: np.ndarray, idx=None) -> tuple[float, np.ndarray]:
        A, b = (self.A, self.b) if idx is None else (self.A[idx], self.b[idx])
        r = A @ w - b
        return 0.5 * float(r @ r), A.T @ r

    def value(self, w: np.ndarray) -> float:
        return self.value_and_grad(w)[0]

    def hessian(self, w: np.ndarray | None = None) -> np.ndarray:
        return self._AtA.copy()

    def diag_curvature(self, w: np.ndarray | None = None) -> np.ndarray:
        return np.diag(self._AtA).copy()


def rescaled(loss: QuadraticLoss, factor: float) -> QuadraticLoss:
    """The same least-squares problem with the loss multiplied by ``factor``."""
    r = np.sqrt(factor)
    return QuadraticLoss(r * loss.A, r * loss.b)


def quadratic_optimum(losses: list[QuadraticLoss], delta: float,
                      per_example: bool = False) -> np.ndarray:
    """Minimizer of sum_k l_k(w) + 0.5 * delta * ||w||^2 from the normal equations.

    With ``per_example`` every client loss is divided by its row count first.
    """
    P = losses[0].dim
    H = delta * np.eye(P)
    g = np.zeros(P)
    for loss in losses:
        s = 1.0 / loss.n if per_example else 1.0
        H += s * loss.A.T @ loss.A
        g += s * loss.A.T @ loss.b
    return np.linalg.solve(H, g)


@dataclass(frozen=True)
class QuadraticClientsSpec:
    clients: int = 4
    dim: int = 8
    rows: int = 12
    noise: float = 0.1
    heterogeneity: float = 1.0  # spread of the per-client targets
    scale: float | None = None  # std of the entries of A_k; None gives 1/sqrt(rows)
    diagonal: bool = False  # orthogonal columns, so every A_k^T A_k is diagonal


def quadratic_clients(spec: QuadraticClientsSpec, rng: np.random.Generator) -> list[QuadraticLoss]:
    """Clients whose least-squares targets scatter around a common vector.

    With the default scale each A_k^T A_k is close to the identity.  The
    ``diagonal`` variant draws A_k = Q_k diag(d_k) with orthonormal Q_k and
    d_k uniform in [0.5, 2], giving exactly diagonal Hessians.
    """
    if spec.clients < 1 or spec.dim < 1 or spec.rows < 1:
        raise ShapeError("quadratic clients need positive clients, dim and rows")
    if spec.diagonal and spec.rows < spec.dim:
        raise ShapeError("diagonal quadratic clients need rows >= dim")
    scale = 1.0 / np.sqrt(spec.rows) if spec.scale is None else spec.scale
    center = rng.normal(size=spec.dim)
    losses = []
    for _ in range(spec.clients):
        if spec.diagonal:
            Q, _ = np.linalg.qr(rng.normal(size=(spec.rows, spec.dim)))
            A = Q * rng.uniform(0.5, 2.0, size=spec.dim)
        else:
            A = scale * rng.normal(size=(spec.rows, spec.dim))
        target = center + spec.heterogeneity * rng.normal(size=spec.dim)
        b = A @ target + spec.noise * rng.normal(size=spec.rows)
        losses.append(QuadraticLoss(A, b))
    return losses


@dataclass(frozen=True)
class BlobsSpec:
    points: int = 1000
    dim: int = 2
    class_count: int = 2
    separation: float = 8.0
    scale: float = 1.0
    test_fraction: float = 0.2


def gaussian_blobs(spec: BlobsSpec, rng: np.random.Generator) -> Dataset:
    """Isotropic Gaussian classes whose means sit ``separation`` apart along random directions."""
    if spec.dim < 1 or spec.class_count < 2 or spec.points < spec.class_count:
        raise ShapeError("blobs need dim >= 1, at least two classes and a point per class")
    dirs = rng.normal(size=(spec.class_count, spec.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = 0.5 * spec.separation * dirs
    if spec.class_count == 2:
        means[1] = -means[0]
    labels = np.arange(spec.points) % spec.class_count
    X = means[labels] + spec.scale * rng.normal(size=(spec.points, spec.dim))
    train, test = stratified_holdout(labels, spec.test_fraction, rng)
    return Dataset(X[train], labels[train], X[test], labels[test], spec.class_count,
                   name="gaussian-blobs")


def generate_synthetic(kind: str, params: dict, rng: np.random.Generator):
    """Dispatch on ``kind``: a list of client losses or a Dataset."""
    if kind == "quadratic-clients":
        return quadratic_clients(QuadraticClientsSpec(**params), rng)
    if kind == "gaussian-blobs":
        return gaussian_blobs(BlobsSpec(**params), rng)
    raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
