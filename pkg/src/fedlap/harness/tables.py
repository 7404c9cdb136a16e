"""Comparison tables and sweep summaries computed from JSONL result files."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path

import numpy as np

from .runner import read_results, rounds_to_accuracy

MODES = ("avg", "max", "rounds")
UNREACHED = "--"


def _dataset_label(cfg: dict) -> str:
    ds, split = cfg["dataset"], cfg["split"]
    if ds["kind"] == "quadratic-clients":
        return ds["kind"]
    return f"{ds['kind']}/{split['kind']}"


def load_runs(paths) -> list[tuple[dict, list[dict]]]:
    runs = []
    for p in sorted({str(Path(p)) for p in paths}):
        head, rows = read_results(p)
        if head is None:
            raise ValueError(f"{p}: no header line")
        runs.append((head, rows))
    return runs


def _group(runs):
    """Rows keyed by (dataset, algorithm); split further by run name when names differ."""
    groups = defaultdict(list)
    for head, rows in runs:
        cfg = head["config"]
        groups[(_dataset_label(cfg), cfg["strategy"].get("algorithm", "fedlap"))].append((head, rows))
    out = {}
    for (ds, alg), members in groups.items():
        names = sorted({h["name"] for h, _ in members})
        if len(names) == 1:
            out[(ds, alg)] = members
        else:
            for n in names:
                out[(ds, alg, n)] = [m for m in members if m[0]["name"] == n]
    return dict(sorted(out.items()))


def _at_round(rows, r: int, key: str):
    for rec in rows:
        if rec.get("type") == "round" and rec["round"] == r:
            return rec.get(key)
    return None


def mean_std(values) -> tuple[float, float] | None:
    vals = [v for v in values if v is not None]
    if not vals or len(vals) != len(values):
        return None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def fmt_pct(ms) -> str:
    if ms is None:
        return "n/a"
    return f"{100 * ms[0]:.1f}({100 * ms[1]:.1f})"


def build_table(runs, columns, mode: str = "avg") -> tuple[list[str], list[list[str]]]:
    """Header and body rows.

    ``avg``/``max``: columns are rounds, cells mean(std) in percent of acc_avg_last3
    or acc_max_last3 over seeds.  ``rounds``: columns are accuracy thresholds in
    [0, 1], cells the mean rounds to reach them, "--" when any seed never does.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    key = "acc_max_last3" if mode == "max" else "acc_avg_last3"
    header = ["dataset", "algorithm"]
    header += [f">={100 * c:.1f}%" for c in columns] if mode == "rounds" else [f"r{c}" for c in columns]
    body = []
    for gkey, members in _group(runs).items():
        label = gkey[1] if len(gkey) == 2 else f"{gkey[1]} [{gkey[2]}]"
        row = [gkey[0], label]
        for c in columns:
            if mode == "rounds":
                hits = [rounds_to_accuracy(rows, c) for _, rows in members]
                row.append(UNREACHED if any(h is None for h in hits) else f"{np.mean(hits):.1f}")
            else:
                row.append(fmt_pct(mean_std([_at_round(rows, c, key) for _, rows in members])))
        body.append(row)
    return header, body


def render_text(header, body) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip() for r in [header, *body]]
    return "\n".join(lines) + "\n"


def render_csv(header, body) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return buf.getvalue()


def summarize_point(runs, rounds, key: str = "acc_avg_last3") -> dict:
    """Mean and std over seeds of ``key`` at each requested round."""
    out = {}
    for r in rounds:
        ms = mean_std([_at_round(rows, r, key) for _, rows in runs])
        out[f"mean_r{r}"] = None if ms is None else ms[0]
        out[f"std_r{r}"] = None if ms is None else ms[1]
    return out
