"""Client partitioning of a labelled training set."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import SplitError

SPLIT_KINDS = ("homogeneous", "dirichlet", "uci-credit-fixed", "explicit")
MAX_DIRICHLET_ATTEMPTS = 20

# heterogeneous UCI Credit layout: (clients, points per client, positive rate)
UCI_FIXED_GROUPS = ((5, 36, 0.06), (5, 67, 0.66))


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "homogeneous"
    clients: int = 10
    alpha1: float = 1.0
    alpha2: float = 0.5
    seed: int | None = None
    shards: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ValueError(f"unknown split kind {self.kind!r}; expected one of {SPLIT_KINDS}")
        if self.clients < 1:
            raise ValueError("need at least one client")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("Dirichlet concentrations must be positive")
        if self.kind == "explicit" and self.shards is None:
            raise ValueError("explicit split needs shards")


@dataclass
class ShardAssignment:
    shards: list[np.ndarray]
    per_class_counts: np.ndarray

    @classmethod
    def from_shards(cls, shards: Sequence[Sequence[int]], labels: np.ndarray,
                    class_count: int) -> "ShardAssignment":
        labels = np.asarray(labels, dtype=np.int64)
        arrs = [np.asarray(s, dtype=np.int64) for s in shards]
        counts = np.stack([np.bincount(labels[s], minlength=class_count) for s in arrs]) \
            if arrs else np.zeros((0, class_count), dtype=np.int64)
        return cls(arrs, counts)

    @property
    def clients(self) -> int:
        return len(self.shards)

    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.shards])


def largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Round nonnegative real quotas summing to ``total`` into integers that keep the sum.

    Ties in the fractional part go to the lower index.
    """
    quotas = np.asarray(quotas, dtype=np.float64)
    base = np.floor(quotas).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        frac = quotas - base
        order = np.argsort(-frac, kind="stable")
        base[order[:short]] += 1
    elif short < 0:
        # floating error pushed the floors past the total
        frac = quotas - base
        order = np.argsort(frac, kind="stable")
        for i in order:
            if short == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                short += 1
    return base


def dirichlet_split(labels: np.ndarray, spec: SplitSpec, rng: np.random.Generator,
                    class_count: int | None = None,
                    draw: Callable[[np.ndarray], np.ndarray] | None = None) -> ShardAssignment:
    """Nested-Dirichlet heterogeneous split.

    Client sizes p ~ Dir(alpha1) and per-client class mixes q_k ~ Dir(alpha2)
    give a mass p_k q_kc for every (client, class); each class is then
    divided among clients in proportion to those masses.
    """
    labels = np.asarray(labels, dtype=np.int64)
    K = spec.clients
    C = class_count if class_count is not None else int(labels.max()) + 1
    if len(labels) < K:
        raise SplitError(f"cannot split {len(labels)} points over {K} clients")
    draw = draw if draw is not None else rng.dirichlet
    class_totals = np.bincount(labels, minlength=C)

    for _ in range(MAX_DIRICHLET_ATTEMPTS):
        p = np.asarray(draw(np.full(K, spec.alpha1)), dtype=np.float64)
        q = np.stack([np.asarray(draw(np.full(C, spec.alpha2)), dtype=np.float64) for _ in range(K)])
        mass = p[:, None] * q
        counts = np.zeros((K, C), dtype=np.int64)
        for c in range(C):
            if class_totals[c] == 0:
                continue
            col = mass[:, c]
            s = col.sum()
            share = col / s if s > 0 else np.full(K, 1.0 / K)
            counts[:, c] = largest_remainder(class_totals[c] * share, int(class_totals[c]))
        if np.all(counts.sum(axis=1) > 0):
            break
    else:
        raise SplitError(f"a client received no data in {MAX_DIRICHLET_ATTEMPTS} Dirichlet draws")

    shards: list[list[int]] = [[] for _ in range(K)]
    for c in range(C):
        idx = rng.permutation(np.flatnonzero(labels == c))
        pos = 0
        for k in range(K):
            shards[k].extend(idx[pos:pos + counts[k, c]].tolist())
            pos += counts[k, c]
    return ShardAssignment([np.sort(np.array(s, dtype=np.int64)) for s in shards], counts)


def homogeneous_split(labels: np.ndarray, clients: int, rng: np.random.Generator,
                      class_count: int | None = None) -> ShardAssignment:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) < clients:
        raise SplitError(f"cannot split {len(labels)} points over {clients} clients")
    C = class_count if class_count is not None else int(labels.max()) + 1
    perm = rng.permutation(len(labels))
    shards = [np.sort(s) for s in np.array_split(perm, clients)]
    return ShardAssignment.from_shards(shards, labels, C)


def uci_credit_fixed_split(labels: np.ndarray, rng: np.random.Generator) -> ShardAssignment:
    """Ten-client heterogeneous UCI Credit split.

    Five clients get 36 points at a 6% positive rate and five get 67 points
    at 66%; the positive count per client is the rate times the size rounded
    to the nearest integer.  Positives and negatives are shuffled
    independently, then each client in turn takes its positives followed by
    its negatives.  Points not needed are left out.
    """
    labels = np.asarray(labels, dtype=np.int64)
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    plan = [(size, int(round(rate * size))) for n, size, rate in UCI_FIXED_GROUPS for _ in range(n)]
    need_pos = sum(p for _, p in plan)
    need_neg = sum(s - p for s, p in plan)
    if need_pos > len(pos) or need_neg > len(neg):
        raise SplitError(
            f"fixed UCI split needs {need_pos} positives and {need_neg} negatives, "
            f"training set has {len(pos)} and {len(neg)}")
    shards, ip, ineg = [], 0, 0
    for size, npos in plan:
        shard = np.concatenate([pos[ip:ip + npos], neg[ineg:ineg + size - npos]])
        ip += npos
        ineg += size - npos
        shards.append(np.sort(shard))
    return ShardAssignment.from_shards(shards, labels, 2)


def make_split(labels: np.ndarray, spec: SplitSpec, rng: np.random.Generator,
               class_count: int | None = None) -> ShardAssignment:
    C = class_count if class_count is not None else int(np.max(labels)) + 1
    if spec.kind == "homogeneous":
        return homogeneous_split(labels, spec.clients, rng, C)
    if spec.kind == "dirichlet":
        return dirichlet_split(labels, spec, rng, C)
    if spec.kind == "uci-credit-fixed":
        return uci_credit_fixed_split(labels, rng)
    shards = [list(s) for s in spec.shards]
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in shards]) if shards else np.array([])
    if len(np.unique(flat)) != len(flat):
        raise SplitError("explicit shards overlap")
    return ShardAssignment.from_shards(shards, labels, C)
