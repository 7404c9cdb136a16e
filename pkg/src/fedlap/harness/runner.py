"""The round loop: broadcast, client steps, reduction, evaluation, records."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import ConfigError, FedLapError
from ..objective import AdamConfig
from ..strategies import (ClientMsg, GlobalMsg, Setup, StrategyConfig, client_step, init_client,
                          init_server, server_step)
from .comm import BYTES_PER_SCALAR
from .config import ExperimentConfig
from .problem import Problem, build_problem, client_rng

log = logging.getLogger(__name__)

WORKERS_ENV = "FEDLAP_WORKERS"


def default_workers(clients: int) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        return max(1, min(cap, clients))
    return max(1, min(os.cpu_count() or 1, clients))


class ClientWorker:
    """One client's private state and data; turns a GlobalMsg into a ClientMsg."""

    def __init__(self, cfg: StrategyConfig, setup: Setup, client_id: int, shard, local: AdamConfig,
                 seed: int, dim: int):
        self.cfg, self.setup, self.shard, self.local = cfg, setup, shard, local
        self.seed = seed
        self.state = init_client(cfg, client_id, dim)

    @property
    def client_id(self) -> int:
        return self.state.client_id

    def handle(self, msg: GlobalMsg) -> ClientMsg:
        rng = client_rng(self.seed, self.client_id, msg.round)
        self.state, out = client_step(self.cfg, self.setup, self.state, msg, self.shard, self.local, rng)
        return out


def make_workers(cfg: ExperimentConfig, problem: Problem, seed: int) -> list[ClientWorker]:
    strategy, local = cfg.strategy_config, cfg.local_config
    return [ClientWorker(strategy, problem.setup, k, problem.shards[k], local, seed, problem.dim)
            for k in range(problem.clients)]


class InProcessTransport:
    """Client steps on a thread pool; results are gathered in client-id order."""

    def __init__(self, workers: list[ClientWorker], max_workers: int = 1, order=None):
        self.workers = workers
        self.order = list(order) if order is not None else list(range(len(workers)))
        self.pool = ThreadPoolExecutor(max_workers) if max_workers > 1 else None

    def exchange(self, msg: GlobalMsg) -> list[ClientMsg]:
        todo = [self.workers[k] for k in self.order]
        if self.pool is None:
            out = [w.handle(msg) for w in todo]
        else:
            out = list(self.pool.map(lambda w: w.handle(msg), todo))
        return sorted(out, key=lambda m: m.client_id)

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _scalars(msg) -> int:
    # model quantities only; memory ids are bookkeeping
    n = 0
    for name in ("w_g", "S_g", "v", "V", "w", "soft_labels"):
        value = getattr(msg, name, None)
        if value is not None:
            n += np.asarray(value).size
    return n


@dataclass
class RoundRecord:
    round: int
    test_accuracy: float | None
    test_nll: float | None
    train_nll: float
    client_losses: list
    bytes_up: int = 0
    bytes_down: int = 0
    scalars_up: list = field(default_factory=list)
    scalars_down: list = field(default_factory=list)
    wall_ms: float | None = None
    acc_avg_last3: float | None = None
    acc_max_last3: float | None = None
    seed: int = 0
    type: str = "round"

    def to_dict(self) -> dict:
        return asdict(self)


def _is_recorded(r: int, cfg: ExperimentConfig) -> bool:
    return r == 0 or r == cfg.rounds or r % cfg.eval_every == 0


def _needs_eval(r: int, cfg: ExperimentConfig) -> bool:
    # a recorded round needs the accuracies of itself and the two before it
    return any(_is_recorded(t, cfg) for t in (r, r + 1, r + 2) if t <= cfg.rounds)


def _trailing(history: dict, r: int) -> tuple[float | None, float | None]:
    """Mean and max test accuracy over rounds max(1, r-2)..r (round 0 only for itself)."""
    rounds = [r] if r == 0 else [t for t in (r - 2, r - 1, r) if t >= 1]
    accs = [history[t] for t in rounds if history.get(t) is not None]
    if not accs:
        return None, None
    return float(np.mean(accs)), float(max(accs))


def run_seed(cfg: ExperimentConfig, seed: int, transport=None, problem: Problem | None = None,
             on_round=None) -> Iterator[dict]:
    """Records for one seed: round 0 (initial model), then every ``eval_every`` rounds and the last.

    A library error inside the loop ends the seed with a ``failure`` row.
    ``on_round(round, global_msg)`` sees every new global model.
    """
    problem = problem if problem is not None else build_problem(cfg, seed)
    strategy = cfg.strategy_config
    own_transport = transport is None
    if own_transport:
        transport = InProcessTransport(make_workers(cfg, problem, seed), default_workers(problem.clients))
    history: dict[int, float | None] = {}

    def record(r, w, up, down, wall):
        metrics = problem.evaluate(w)
        history[r] = metrics["test_accuracy"]
        if not _is_recorded(r, cfg):
            return None
        avg, mx = _trailing(history, r)
        return RoundRecord(round=r, **metrics, bytes_up=BYTES_PER_SCALAR * sum(up),
                           bytes_down=BYTES_PER_SCALAR * sum(down), scalars_up=up, scalars_down=down,
                           wall_ms=wall if cfg.timing else None, acc_avg_last3=avg, acc_max_last3=mx,
                           seed=seed).to_dict()

    r = 0
    try:
        server, g = init_server(strategy, problem.setup, problem.w0)
        yield record(0, g.w_g, [], [], None)
        for r in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            msgs = transport.exchange(g)
            server, nxt = server_step(strategy, problem.setup, server, msgs)
            wall = 1e3 * (time.perf_counter() - t0)
            up = [_scalars(m) for m in msgs]
            down = [_scalars(g)] * len(msgs)
            g = nxt
            if on_round is not None:
                on_round(r, g)
            if _needs_eval(r, cfg):
                rec = record(r, g.w_g, up, down, wall)
                if rec is not None:
                    yield rec
    except FedLapError as e:
        log.error("seed %d failed at round %d: %s", seed, r, e)
        yield {"type": "failure", "seed": seed, "round": r, "error_type": type(e).__name__,
               "error": str(e)}
    finally:
        if own_transport:
            transport.close()


def header(cfg: ExperimentConfig, seed: int, problem: Problem | None = None) -> dict:
    out = {"type": "header", "name": cfg.name, "seed": seed, "config": cfg.to_dict()}
    if problem is not None:
        out["resolved"] = {
            "param_count": problem.dim,
            "clients": problem.clients,
            "sizes": list(problem.setup.sizes),
            "model": problem.model.to_dict() if problem.model is not None else None,
            "memory_points": len(problem.setup.memory) if problem.setup.memory is not None else 0,
            "strategy": cfg.strategy_config.to_dict(),
            "local": cfg.local_config.to_dict(),
        }
    return out


def run_experiment(cfg: ExperimentConfig) -> Iterator[dict]:
    """Stream of header and round records over all seeds, in seed order."""
    for seed in cfg.seeds:
        problem = build_problem(cfg, seed)
        yield header(cfg, seed, problem)
        yield from run_seed(cfg, seed, problem=problem)


def results_path(cfg: ExperimentConfig, seed: int, out_dir=None) -> Path:
    return Path(out_dir if out_dir is not None else cfg.output) / f"{cfg.name}-seed{seed}.jsonl"


def dumps(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"))


def write_seed(cfg: ExperimentConfig, seed: int, out_dir=None, transport=None,
               problem: Problem | None = None) -> tuple[Path, bool]:
    """Write one seed's JSONL file; returns (path, finished without failure)."""
    path = results_path(cfg, seed, out_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    problem = problem if problem is not None else build_problem(cfg, seed)
    ok = True
    with open(path, "w") as fh:
        fh.write(dumps(header(cfg, seed, problem)) + "\n")
        for rec in run_seed(cfg, seed, transport=transport, problem=problem):
            ok = ok and rec["type"] != "failure"
            fh.write(dumps(rec) + "\n")
    return path, ok


def write_results(cfg: ExperimentConfig, out_dir=None) -> tuple[list[Path], bool]:
    paths, ok = [], True
    for seed in cfg.seeds:
        p, seed_ok = write_seed(cfg, seed, out_dir)
        paths.append(p)
        ok = ok and seed_ok
    return paths, ok


def read_results(path) -> tuple[dict | None, list[dict]]:
    """(header, round and failure records) of one JSONL file."""
    head, rows = None, []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("type") == "header":
                head = rec
            else:
                rows.append(rec)
    return head, rows


def rounds_to_accuracy(records, threshold: float, key: str = "test_accuracy") -> int | None:
    """First round whose accuracy reaches ``threshold`` (>=), or None if never.

    ``records`` may be round records or a plain sequence of accuracies for rounds 1, 2, ...
    """
    for i, rec in enumerate(records):
        if isinstance(rec, dict):
            if rec.get("type", "round") != "round" or rec.get("round") == 0:
                continue
            acc, rnd = rec.get(key), rec["round"]
        else:
            acc, rnd = rec, i + 1
        if acc is not None and acc >= threshold:
            return rnd
    return None
