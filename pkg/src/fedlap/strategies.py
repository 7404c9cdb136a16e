"""The seven federated algorithms as round-step functions over explicit messages.

Every algorithm is split into a client step, which turns the broadcast
``GlobalMsg`` plus the client's private state into a ``ClientMsg``, and a
server step, which reduces the client messages into the next ``GlobalMsg``.
Both are plain functions: no transport, threading or I/O happens here.

Notation follows the code: ``w_g`` global weights, ``v``/``V`` a client's
linear and (diagonal) quadratic dual terms, ``S_g`` the diagonal global
precision, ``delta`` the prior precision and ``rho`` the damping.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import StrategyError
from .model import ModelSpec, soft_label
from .objective import AdamConfig, FuncTerm, ObjectiveSpec, minimize, solve_exact

ALGORITHMS = ("fedavg", "fedprox", "fedadmm", "feddyn", "fedlap", "fedlap-cov", "fedlap-func")
BASELINES = ("fedavg", "fedprox", "fedadmm", "feddyn")
RHO_MODES = ("proportional", "uniform", "schedule")
SERVER_ID = 0xFFFFFFFF


# --- messages and state -------------------------------------------------------

@dataclass(frozen=True)
class GlobalMsg:
    round: int
    w_g: np.ndarray
    S_g: np.ndarray | None = None
    soft_label_ids: np.ndarray | None = None
    soft_labels: np.ndarray | None = None


@dataclass(frozen=True)
class ClientMsg:
    client_id: int
    round: int
    v: np.ndarray | None = None
    V: np.ndarray | None = None
    w: np.ndarray | None = None
    soft_label_ids: np.ndarray | None = None
    soft_labels: np.ndarray | None = None


@dataclass
class ClientState:
    client_id: int
    v: np.ndarray
    V: np.ndarray | None = None
    w: np.ndarray | None = None
    soft_labels: np.ndarray | None = None  # own memory points, at the previous w_k


@dataclass
class MemorySet:
    """Inputs over which soft labels are exchanged, with their tau weights.

    Rows are ordered by owner and ids are 0..M-1 in that order.
    """

    ids: np.ndarray
    inputs: np.ndarray
    owners: np.ndarray
    labels: np.ndarray
    local_index: np.ndarray
    tau: np.ndarray

    @classmethod
    def empty(cls, input_dim: int) -> "MemorySet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, np.zeros((0, input_dim)), z, z, z, np.zeros(0))

    def __len__(self) -> int:
        return len(self.ids)

    def rows_of(self, client_id: int) -> np.ndarray:
        return np.flatnonzero(self.owners == client_id)


def build_memory(inputs: list[np.ndarray], labels: list[np.ndarray], class_count: int,
                 per_class: int, tau_f: float, rng: np.random.Generator) -> MemorySet:
    """Pick ``per_class`` random points of every class a client holds.

    Each point is weighted tau_i = tau_f * N_kc / M_kc, the class mass it stands for.
    """
    rows_x, owners, labs, local, tau = [], [], [], [], []
    for k, (X, y) in enumerate(zip(inputs, labels)):
        y = np.asarray(y)
        for c in range(class_count):
            members = np.flatnonzero(y == c)
            if len(members) == 0 or per_class == 0:
                continue
            chosen = np.sort(rng.choice(members, size=min(per_class, len(members)), replace=False))
            for i in chosen:
                rows_x.append(X[i])
                owners.append(k)
                labs.append(c)
                local.append(i)
                tau.append(tau_f * len(members) / len(chosen))
    if not rows_x:
        return MemorySet.empty(inputs[0].shape[1] if inputs else 1)
    n = len(rows_x)
    return MemorySet(np.arange(n), np.array(rows_x), np.array(owners), np.array(labs),
                     np.array(local), np.array(tau, dtype=np.float64))


@dataclass(frozen=True)
class Setup:
    """What every party knows before round 1: client sizes, the model and the memory set."""

    sizes: tuple[int, ...]
    model: ModelSpec | None = None
    memory: MemorySet | None = None

    @property
    def clients(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return int(sum(self.sizes))


@dataclass(frozen=True)
class StrategyConfig:
    algorithm: str = "fedlap"
    delta: float = 1.0
    alpha: float = 1.0
    rho: str | float = "auto"
    rho_switch_round: int = 10
    weight_decay: float = 0.0  # FedDyn's extra local weight decay
    tau_f: float = 1.0
    memory_per_class: int = 1
    local_solver: str = "adam"  # or "exact"
    server_solver: str = "adam"  # FedLap-Func server problem
    server_opt: AdamConfig = field(default_factory=lambda: AdamConfig(learning_rate=1e-3, epochs=5000))
    curvature: str = "ggn"  # "zero" switches off FedLap-Cov's curvature

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.algorithm.startswith("fedlap") and not self.delta > 0:
            raise ValueError("delta must be positive for the FedLap family")
        if self.alpha < 0 or self.weight_decay < 0 or self.tau_f < 0:
            raise ValueError("alpha, weight_decay and tau_f must be nonnegative")
        if self.algorithm in ("fedadmm", "feddyn") and self.alpha == 0:
            raise ValueError(f"{self.algorithm} needs alpha > 0")
        if isinstance(self.rho, str):
            if self.rho != "auto" and self.rho not in RHO_MODES:
                raise ValueError(f"rho must be a number in (0, 1], 'auto' or one of {RHO_MODES}")
        elif not 0 < float(self.rho) <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.local_solver not in ("adam", "exact") or self.server_solver not in ("adam", "exact"):
            raise ValueError("solvers must be 'adam' or 'exact'")
        if self.curvature not in ("ggn", "zero"):
            raise ValueError("curvature must be 'ggn' or 'zero'")
        if self.memory_per_class < 0:
            raise ValueError("memory_per_class must be nonnegative")

    @property
    def rho_mode(self) -> str | float:
        if self.rho != "auto":
            return self.rho
        return "uniform" if self.algorithm == "fedlap-cov" else "proportional"

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["server_opt"] = self.server_opt.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        d = dict(d)
        if isinstance(d.get("server_opt"), dict):
            d["server_opt"] = AdamConfig(**d["server_opt"])
        return cls(**d)


@dataclass
class ServerState:
    round: int
    w_g: np.ndarray
    S_g: np.ndarray | None = None
    duals: dict[int, np.ndarray] = field(default_factory=dict)  # FedADMM/FedDyn copies of v_k
    soft_labels: np.ndarray | None = None


def rho_for(cfg: StrategyConfig, sizes: tuple[int, ...], client_id: int, round_: int) -> float:
    mode = cfg.rho_mode
    if not isinstance(mode, str):
        return float(mode)
    if mode == "schedule":
        mode = "proportional" if round_ <= cfg.rho_switch_round else "uniform"
    if mode == "proportional":
        return sizes[client_id] / float(sum(sizes))
    return 1.0 / len(sizes)


def _dual_step(v: np.ndarray, rho: float, w_k: np.ndarray, w_g: np.ndarray) -> np.ndarray:
    return v + rho * (w_k - w_g)


def _solve(cfg: StrategyConfig, obj: ObjectiveSpec, start: np.ndarray, local: AdamConfig,
           rng, context: dict) -> np.ndarray:
    if cfg.local_solver == "exact":
        return solve_exact(obj, start)
    return minimize(obj, start, local, rng=rng, context=context)


def _ordered(msgs: list[ClientMsg], K: int) -> list[ClientMsg]:
    by_id = {}
    for m in msgs:
        if m.client_id in by_id:
            raise StrategyError(f"duplicate message from client {m.client_id}")
        by_id[m.client_id] = m
    missing = [k for k in range(K) if k not in by_id]
    if missing or len(by_id) != K:
        raise StrategyError(f"missing messages from clients {missing}")
    return [by_id[k] for k in range(K)]


def _sum(vectors) -> np.ndarray:
    # fixed left-to-right order for bit reproducibility
    total = None
    for x in vectors:
        total = x.copy() if total is None else total + x
    return total


# --- FedLap -----------------------------------------------------------------------

def fedlap_client_objective(cfg: StrategyConfig, state: ClientState, msg: GlobalMsg,
                            shard) -> ObjectiveSpec:
    """l_k(w) + delta v_k^T w + 0.5 delta ||w - w_g||^2."""
    return ObjectiveSpec(dim=len(msg.w_g), base=shard, linear=state.v, linear_scale=cfg.delta,
                         prox_anchor=msg.w_g, prox_metric=cfg.delta)


def fedlap_client_step(cfg, setup, state, msg, shard, local, rng):
    obj = fedlap_client_objective(cfg, state, msg, shard)
    ctx = {"round": msg.round, "client": state.client_id}
    w_k = _solve(cfg, obj, msg.w_g, local, rng, ctx)
    rho = rho_for(cfg, setup.sizes, state.client_id, msg.round)
    new = replace(state, v=_dual_step(state.v, rho, w_k, msg.w_g), w=w_k)
    return new, ClientMsg(client_id=state.client_id, round=msg.round, v=new.v)


def fedlap_server_step(msgs: list[ClientMsg], K: int) -> GlobalMsg:
    """w_g = sum_k v_k."""
    msgs = _ordered(msgs, K)
    return GlobalMsg(round=msgs[0].round + 1, w_g=_sum(m.v for m in msgs))


# --- FedLap-Cov ---------------------------------------------------------------------

def fedlapcov_dual_update(v, V, H, S_g, w_k, w_g, rho):
    """Return (v, V) after one damped site update; S_k = H - V + S_g must stay positive."""
    S_k = H - V + S_g
    if np.any(S_k <= 0):
        bad = int(np.flatnonzero(S_k <= 0)[0])
        raise StrategyError(f"client precision S_k must stay positive; entry {bad} is {S_k[bad]:g}")
    v_new = v + rho * (S_k * w_k - S_g * w_g)
    V_new = (1.0 - rho) * V + rho * H
    return v_new, V_new


def fedlapcov_client_step(cfg, setup, state, msg, shard, local, rng):
    if msg.S_g is None:
        raise StrategyError("FedLap-Cov needs S_g in the global message")
    P = len(msg.w_g)
    V = state.V if state.V is not None else np.zeros(P)
    obj = ObjectiveSpec(dim=P, base=shard, linear=state.v, quad_dual=V, prox_anchor=msg.w_g,
                        prox_metric=msg.S_g)
    ctx = {"round": msg.round, "client": state.client_id}
    w_k = _solve(cfg, obj, msg.w_g, local, rng, ctx)
    H = shard.diag_curvature(w_k) if cfg.curvature == "ggn" else np.zeros(P)
    rho = rho_for(cfg, setup.sizes, state.client_id, msg.round)
    v, V = fedlapcov_dual_update(state.v, V, H, msg.S_g, w_k, msg.w_g, rho)
    new = replace(state, v=v, V=V, w=w_k)
    return new, ClientMsg(client_id=state.client_id, round=msg.round, v=v, V=V)


def fedlapcov_server_step(msgs: list[ClientMsg], delta: float, K: int) -> GlobalMsg:
    """S_g = delta + sum_k V_k; w_g = (sum_k v_k) / S_g."""
    msgs = _ordered(msgs, K)
    if any(np.any(m.V < 0) for m in msgs):
        raise StrategyError("received a negative curvature entry")
    S_g = delta + _sum(m.V for m in msgs)
    return GlobalMsg(round=msgs[0].round + 1, w_g=_sum(m.v for m in msgs) / S_g, S_g=S_g)


# --- FedLap-Func ----------------------------------------------------------------------

def _global_soft(msg: GlobalMsg, memory: MemorySet) -> np.ndarray:
    if len(memory) == 0:
        return np.zeros((0, 0))
    if msg.soft_labels is None or msg.soft_label_ids is None:
        raise StrategyError("global message has no soft labels for the memory set")
    ids = np.asarray(msg.soft_label_ids, dtype=np.int64)
    if not np.array_equal(ids, memory.ids):
        missing = sorted(set(memory.ids.tolist()) - set(ids.tolist()))
        raise StrategyError(f"global soft labels do not cover memory ids {missing[:5]}")
    return msg.soft_labels


def fedlapfunc_client_objective(cfg: StrategyConfig, setup: Setup, state: ClientState,
                                msg: GlobalMsg, shard) -> ObjectiveSpec:
    """FedLap's objective minus own soft-label terms plus global soft-label terms."""
    obj = fedlap_client_objective(cfg, state, msg, shard)
    memory = setup.memory
    if memory is None or len(memory) == 0:
        return obj
    glob = _global_soft(msg, memory)
    own = memory.rows_of(state.client_id)
    # before any local model exists the own labels equal the global ones and the terms cancel
    own_soft = state.soft_labels if state.soft_labels is not None else glob[own]
    terms = []
    if len(own):
        terms.append(FuncTerm(setup.model, memory.inputs[own], own_soft, memory.tau[own], -1.0))
    terms.append(FuncTerm(setup.model, memory.inputs, glob, memory.tau, 1.0))
    obj.func_terms = terms
    return obj


def fedlapfunc_client_step(cfg, setup, state, msg, shard, local, rng):
    obj = fedlapfunc_client_objective(cfg, setup, state, msg, shard)
    ctx = {"round": msg.round, "client": state.client_id}
    w_k = _solve(cfg, obj, msg.w_g, local, rng, ctx)
    rho = rho_for(cfg, setup.sizes, state.client_id, msg.round)
    new = replace(state, v=_dual_step(state.v, rho, w_k, msg.w_g), w=w_k)
    memory = setup.memory
    ids = soft = None
    if memory is not None and len(memory):
        own = memory.rows_of(state.client_id)
        new.soft_labels = soft_label(setup.model, w_k, memory.inputs[own])
        ids, soft = memory.ids[own], new.soft_labels
    return new, ClientMsg(client_id=state.client_id, round=msg.round, v=new.v,
                          soft_label_ids=ids, soft_labels=soft)


def fedlapfunc_server_step(cfg: StrategyConfig, setup: Setup, w_prev: np.ndarray,
                           msgs: list[ClientMsg]) -> GlobalMsg:
    """argmin_w sum_i tau_i CE(yhat_i, w) - delta (sum_k v_k)^T w + 0.5 delta ||w||^2."""
    msgs = _ordered(msgs, setup.clients)
    v_sum = _sum(m.v for m in msgs)
    rnd = msgs[0].round + 1
    memory = setup.memory
    if memory is None or len(memory) == 0 or not np.any(memory.tau):
        # no function-space terms: the minimizer is sum_k v_k in closed form
        w_g = v_sum
        if memory is None or len(memory) == 0:
            return GlobalMsg(round=rnd, w_g=w_g)
        return GlobalMsg(round=rnd, w_g=w_g, soft_label_ids=memory.ids,
                         soft_labels=soft_label(setup.model, w_g, memory.inputs))
    C = setup.model.class_count
    client_soft = np.full((len(memory), C), np.nan)
    for m in msgs:
        if m.soft_label_ids is None:
            continue
        client_soft[np.asarray(m.soft_label_ids, dtype=np.int64)] = m.soft_labels
    if np.isnan(client_soft).any():
        missing = np.flatnonzero(np.isnan(client_soft).any(axis=1))
        raise StrategyError(f"no client soft labels for memory ids {missing[:5].tolist()}")
    term = FuncTerm(setup.model, memory.inputs, client_soft, memory.tau, 1.0)
    obj = ObjectiveSpec(dim=len(v_sum), linear=v_sum, linear_scale=-cfg.delta, l2=cfg.delta,
                        func_terms=[term])
    if cfg.server_solver == "exact":
        w_g = solve_exact(obj, w_prev)
    else:
        w_g = minimize(obj, w_prev, cfg.server_opt, rng=np.random.default_rng(0),
                       context={"round": msgs[0].round, "client": "server"})
    return GlobalMsg(round=rnd, w_g=w_g, soft_label_ids=memory.ids,
                     soft_labels=soft_label(setup.model, w_g, memory.inputs))


# --- baselines --------------------------------------------------------------------------

def _alpha_k(cfg: StrategyConfig, n_k: int) -> float:
    return cfg.alpha / n_k if cfg.algorithm == "feddyn" else cfg.alpha


def baseline_client_step(cfg, setup, state, msg, shard, local, rng):
    """FedAvg/FedProx/FedADMM/FedDyn on the per-example mean loss l_k / N_k."""
    kind = cfg.algorithm
    P = len(msg.w_g)
    n_k = setup.sizes[state.client_id]
    obj = ObjectiveSpec(dim=P, base=shard, base_scale=1.0 / n_k)
    a_k = _alpha_k(cfg, n_k)
    if kind in ("fedprox", "fedadmm", "feddyn") and a_k > 0:
        obj.prox_anchor, obj.prox_metric = msg.w_g, np.full(P, a_k)
    if kind in ("fedadmm", "feddyn"):
        obj.linear = state.v
    if kind == "feddyn" and cfg.weight_decay:
        obj.l2 = cfg.weight_decay
    ctx = {"round": msg.round, "client": state.client_id}
    w_k = _solve(cfg, obj, msg.w_g, local, rng, ctx)
    v = _dual_step(state.v, a_k, w_k, msg.w_g) if kind in ("fedadmm", "feddyn") else state.v
    new = replace(state, v=v, w=w_k)
    return new, ClientMsg(client_id=state.client_id, round=msg.round, w=w_k)


def baseline_server_step(cfg: StrategyConfig, setup: Setup, server: ServerState | None,
                         msgs: list[ClientMsg]) -> tuple[ServerState | None, GlobalMsg]:
    msgs = _ordered(msgs, setup.clients)
    rnd = msgs[0].round + 1
    if cfg.algorithm in ("fedavg", "fedprox"):
        N = float(setup.total)
        w_g = _sum((setup.sizes[m.client_id] / N) * m.w for m in msgs)
        if server is not None:
            server = replace(server, round=rnd, w_g=w_g)
        return server, GlobalMsg(round=rnd, w_g=w_g)
    # FedADMM/FedDyn: replay each client's dual update on the server's copy of v_k
    duals = dict(server.duals)
    parts = []
    for m in msgs:
        a_k = _alpha_k(cfg, setup.sizes[m.client_id])
        v = duals.get(m.client_id, np.zeros_like(m.w))
        v = _dual_step(v, a_k, m.w, server.w_g)
        duals[m.client_id] = v
        parts.append(m.w + v / a_k)
    w_g = _sum(parts) / len(msgs)
    return replace(server, round=rnd, w_g=w_g, duals=duals), GlobalMsg(round=rnd, w_g=w_g)


# --- dispatch -------------------------------------------------------------------------------

def init_client(cfg: StrategyConfig, client_id: int, dim: int) -> ClientState:
    V = np.zeros(dim) if cfg.algorithm == "fedlap-cov" else None
    return ClientState(client_id=client_id, v=np.zeros(dim), V=V)


def init_server(cfg: StrategyConfig, setup: Setup, w0: np.ndarray) -> tuple[ServerState, GlobalMsg]:
    w0 = np.array(w0, dtype=np.float64)
    S_g = np.full(len(w0), cfg.delta) if cfg.algorithm == "fedlap-cov" else None
    ids = soft = None
    memory = setup.memory
    if cfg.algorithm == "fedlap-func" and memory is not None and len(memory):
        if setup.model is None:
            raise StrategyError("FedLap-Func needs the model to compute soft labels")
        ids, soft = memory.ids, soft_label(setup.model, w0, memory.inputs)
    server = ServerState(round=1, w_g=w0, S_g=S_g,
                         duals={k: np.zeros(len(w0)) for k in range(setup.clients)}, soft_labels=soft)
    return server, GlobalMsg(round=1, w_g=w0, S_g=S_g, soft_label_ids=ids, soft_labels=soft)


_CLIENT_STEPS = {
    "fedlap": fedlap_client_step,
    "fedlap-cov": fedlapcov_client_step,
    "fedlap-func": fedlapfunc_client_step,
}


def client_step(cfg: StrategyConfig, setup: Setup, state: ClientState, msg: GlobalMsg, shard,
                local: AdamConfig, rng: np.random.Generator | None) -> tuple[ClientState, ClientMsg]:
    step = _CLIENT_STEPS.get(cfg.algorithm, baseline_client_step)
    return step(cfg, setup, state, msg, shard, local, rng)


def server_step(cfg: StrategyConfig, setup: Setup, server: ServerState,
                msgs: list[ClientMsg]) -> tuple[ServerState, GlobalMsg]:
    alg = cfg.algorithm
    if alg in BASELINES:
        return baseline_server_step(cfg, setup, server, msgs)
    if alg == "fedlap":
        out = fedlap_server_step(msgs, setup.clients)
    elif alg == "fedlap-cov":
        out = fedlapcov_server_step(msgs, cfg.delta, setup.clients)
    else:
        out = fedlapfunc_server_step(cfg, setup, server.w_g, msgs)
    new = replace(server, round=out.round, w_g=out.w_g, S_g=out.S_g, soft_labels=out.soft_labels)
    return new, out
