"""Command-line front end: ``fedlap {run,sweep,oracle,table,serve,client}``.

Exit codes: 0 success, 1 runtime failure (including a failed seed), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import glob
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, FedLapError
from .harness.config import ExperimentConfig, apply_overrides, valid_keys
from .harness.oracle import centralized_oracle
from .harness.runner import write_results
from .harness.tables import (MODES, build_table, load_runs, render_csv, render_text,
                             summarize_point)
from .harness.tcp import TcpServer, tcp_client

log = logging.getLogger("fedlap")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def _config(args) -> ExperimentConfig:
    d = _read_json(args.config)
    overrides = list(args.set or [])
    if getattr(args, "rounds", None) is not None:
        overrides.append(f"rounds={args.rounds}")
    if getattr(args, "seeds", None):
        overrides.append(f"seeds={json.dumps(args.seeds)}")
    if getattr(args, "output", None):
        overrides.append(f"output={json.dumps(args.output)}")
    return ExperimentConfig.from_dict(apply_overrides(d, overrides))


# --- run ----------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _config(args)
    paths, ok = write_results(cfg)
    for p in paths:
        print(p)
    return EXIT_OK if ok else EXIT_FAIL


# --- sweep --------------------------------------------------------------------------

@dataclass
class SweepSpec:
    base: str
    axes: dict
    seeds: list = field(default_factory=lambda: [0])
    rounds: list = field(default_factory=list)  # rounds reported in the summary
    output: str = "sweep"
    metric: str = "acc_avg_last3"
    overrides: list = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "SweepSpec":
        d = _read_json(path)
        names = list(cls.__dataclass_fields__)
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ConfigError(f"unknown sweep key(s) {unknown}; valid keys: {names}")
        if "base" not in d or "axes" not in d:
            raise ConfigError("a sweep needs 'base' and 'axes'")
        spec = cls(**d)
        base = Path(spec.base)
        if not base.is_absolute():
            spec.base = str(Path(path).parent / base)
        keys = valid_keys()
        for k, vals in spec.axes.items():
            if k not in keys and not k.startswith("dataset.params."):
                raise ConfigError(f"sweep axis {k!r} is not a config key; valid keys: {keys}")
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"sweep axis {k!r} needs a nonempty list of values")
        return spec

    def grid(self) -> list[dict]:
        keys = list(self.axes)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.axes[k] for k in keys))]


def sweep_configs(spec: SweepSpec) -> list[tuple[dict, ExperimentConfig]]:
    base = _read_json(spec.base)
    base_name = base.get("name", "experiment")
    out = []
    for i, point in enumerate(spec.grid()):
        sets = list(spec.overrides) + [f"{k}={json.dumps(v)}" for k, v in point.items()]
        sets += [f"seeds={json.dumps(spec.seeds)}", f"output={json.dumps(spec.output)}",
                 f"name={json.dumps(f'{base_name}-g{i:03d}')}"]
        out.append((point, ExperimentConfig.from_dict(apply_overrides(base, sets))))
    return out


def _run_point(cfg: ExperimentConfig):
    return write_results(cfg)


def cmd_sweep(args) -> int:
    spec = SweepSpec.load(args.sweep)
    if args.output:
        spec.output = args.output
    points = sweep_configs(spec)
    print(f"grid size {len(points)} x {len(spec.seeds)} seeds = {len(points) * len(spec.seeds)} runs",
          flush=True)
    cfgs = [c for _, c in points]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_point, cfgs))
    else:
        results = [_run_point(c) for c in cfgs]
    all_ok = all(ok for _, ok in results)

    rounds = spec.rounds or [cfgs[0].rounds]
    rows = []
    for (point, cfg), (paths, _) in zip(points, results):
        summary = summarize_point(load_runs(paths), rounds, spec.metric)
        rows.append({"name": cfg.name, **{k: json.dumps(v) for k, v in point.items()}, **summary})
    out_dir = Path(spec.output)
    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(summary_path)

    best = best_point(rows, rounds[-1], spec.metric)
    if best is not None:
        axes = ", ".join(f"{k}={best[k]}" for k in spec.axes)
        print(f"best at round {rounds[-1]}: {best['name']} ({axes}) "
              f"{spec.metric} mean {best[f'mean_r{rounds[-1]}']:.4f}")
    return EXIT_OK if all_ok else EXIT_FAIL


def best_point(rows: list[dict], r: int, metric: str) -> dict | None:
    """Row with the best mean at round r; losses are minimized, accuracies maximized."""
    scored = [row for row in rows if row.get(f"mean_r{r}") is not None]
    if not scored:
        return None
    sign = -1.0 if "nll" in metric or "loss" in metric else 1.0
    # first row wins ties, so the choice follows the grid order
    return max(scored, key=lambda row: (sign * row[f"mean_r{r}"], -rows.index(row)))


# --- oracle, table --------------------------------------------------------------------

def cmd_oracle(args) -> int:
    cfg = _config(args)
    for seed in cfg.seeds:
        res = centralized_oracle(cfg, seed=seed, delta=args.delta)
        print(json.dumps({"seed": seed, **res.to_dict()}))
    return EXIT_OK


def cmd_table(args) -> int:
    paths = sorted({p for pattern in args.results for p in glob.glob(pattern)})
    if not paths:
        raise UsageError(f"no result files match {args.results}")
    cols = args.thresholds if args.mode == "rounds" else args.rounds
    if not cols:
        raise UsageError("--rounds (or --thresholds for rounds mode) is required")
    header, body = build_table(load_runs(paths), cols, args.mode)
    sys.stdout.write(render_text(header, body))
    if args.csv:
        Path(args.csv).write_text(render_csv(header, body))
    return EXIT_OK


# --- tcp -------------------------------------------------------------------------------

def cmd_serve(args) -> int:
    cfg = _config(args)
    with TcpServer(cfg, host=args.host, port=args.port) as server:
        host, port = server.address
        print(f"listening on {host}:{port}", file=sys.stderr, flush=True)
        paths, ok = server.serve()
    for p in paths:
        print(p)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_client(args) -> int:
    cfg = _config(args)
    n = tcp_client(cfg, args.id, host=args.host, port=args.port)
    log.info("client %d answered %d rounds", args.id, n)
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------

def _add_config_args(p, run_flags: bool = True):
    p.add_argument("config", help="experiment config (JSON)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. strategy.delta=0.1 (repeatable)")
    if run_flags:
        p.add_argument("--rounds", type=int, help="shorthand for --set rounds=N")
        p.add_argument("--seeds", type=int, nargs="+", help="shorthand for --set seeds=[...]")
        p.add_argument("--output", help="results directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--list-keys", action="store_true", help="print every config key and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("run", help="run an experiment and write JSONL results")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a hyperparameter grid and write summary.csv")
    p.add_argument("sweep", help="sweep spec (JSON): base, axes, seeds, rounds, output")
    p.add_argument("--output", help="override the sweep output directory")
    p.add_argument("--jobs", type=int, default=1, help="grid points run in parallel processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="train the centralized oracle on the pooled shards")
    _add_config_args(p, run_flags=False)
    p.add_argument("--delta", type=float, help="prior precision (default: strategy.delta)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("table", help="comparison table from result files")
    p.add_argument("results", nargs="+", help="JSONL files or glob patterns")
    p.add_argument("--rounds", type=int, nargs="+", help="rounds to report")
    p.add_argument("--mode", choices=MODES, default="avg",
                   help="avg: mean of last 3 accuracies; max: max of last 3; rounds: rounds to threshold")
    p.add_argument("--thresholds", type=float, nargs="+", help="accuracies in [0, 1] for --mode rounds")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("serve", help="run the server side of a TCP session")
    _add_config_args(p)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="run one TCP client")
    _add_config_args(p, run_flags=False)
    p.add_argument("--id", type=int, required=True, help="client id in 0..K-1")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_client)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.list_keys:
        print("\n".join(valid_keys()))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"fedlap: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FedLapError, OSError) as e:
        print(f"fedlap: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
