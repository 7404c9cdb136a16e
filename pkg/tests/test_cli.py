import csv
import json
import subprocess
import sys

import pytest

from fedlap.cli import main
from fedlap.harness import read_results
from fedlap.harness.tables import build_table, load_runs


def write_cfg(path, **over):
    d = {"name": "quad", "dataset": {"kind": "quadratic-clients", "params": {"clients": 3, "dim": 4}},
         "strategy": {"algorithm": "fedlap", "local_solver": "exact"}, "rounds": 3,
         "output": str(path.parent / "out")}
    d.update(over)
    path.write_text(json.dumps(d))
    return path


def blobs_cfg(path, **over):
    d = {"name": "blobs",
         "dataset": {"kind": "gaussian-blobs", "params": {"points": 200, "dim": 2, "separation": 3.0}},
         "split": {"kind": "homogeneous", "clients": 2},
         "model": {"kind": "logistic-binary"},
         "strategy": {"algorithm": "fedlap"},
         "local": {"learning_rate": 0.1, "epochs": 5},
         "rounds": 4, "output": str(path.parent / "out")}
    d.update(over)
    path.write_text(json.dumps(d))
    return path


class TestRun:
    def test_missing_file_exit_2(self, tmp_path, capsys):
        assert main(["run", str(tmp_path / "none.json")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_unknown_override_lists_keys(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.json")
        assert main(["run", str(cfg), "--set", "strategy.bogus=1"]) == 2
        err = capsys.readouterr().err
        assert "valid keys" in err and "strategy.delta" in err

    def test_rounds_zero(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.json")
        assert main(["run", str(cfg), "--rounds", "0"]) == 0
        path = capsys.readouterr().out.strip()
        lines = open(path).read().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["type"] == "header"
        assert json.loads(lines[1])["round"] == 0

    def test_bad_usage_exit_2(self):
        assert main(["run"]) == 2
        assert main([]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failure_exit_1(self, tmp_path):
        # a step this large overflows the prox term on the first update
        cfg = blobs_cfg(tmp_path / "c.json", local={"learning_rate": 1e300, "epochs": 5})
        code = main(["run", str(cfg)])
        path = tmp_path / "out" / "blobs-seed0.jsonl"
        _, rows = read_results(path)
        assert code == 1
        assert rows[-1]["type"] == "failure"

    def test_console_script_module(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json")
        out = subprocess.run([sys.executable, "-m", "fedlap.cli", "run", str(cfg), "--rounds", "1"],
                             capture_output=True, text=True)
        assert out.returncode == 0, out.stderr


class TestOracle:
    def test_prints_json(self, tmp_path, capsys):
        cfg = blobs_cfg(tmp_path / "c.json")
        assert main(["oracle", str(cfg), "--delta", "1e12"]) == 0
        res = json.loads(capsys.readouterr().out)
        assert res["delta"] == 1e12 and res["test_accuracy"] is not None


class TestSweep:
    def test_grid_files_and_summary(self, tmp_path, capsys):
        base = blobs_cfg(tmp_path / "base.json")
        sweep = tmp_path / "sweep.json"
        sweep.write_text(json.dumps({"base": "base.json", "axes": {"strategy.delta": [1.0, 0.1],
                                                                   "local.epochs": [1, 3]},
                                     "seeds": [0, 1, 2], "rounds": [2, 4], "output": str(tmp_path / "sw")}))
        assert main(["sweep", str(sweep)]) == 0
        out = capsys.readouterr().out
        assert "grid size 4 x 3 seeds = 12 runs" in out
        assert len(list((tmp_path / "sw").glob("*.jsonl"))) == 12
        with open(tmp_path / "sw" / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        best = max(rows, key=lambda r: float(r["mean_r4"]))
        assert f"best at round 4: {best['name']}" in out

    def test_unknown_axis(self, tmp_path):
        blobs_cfg(tmp_path / "base.json")
        sweep = tmp_path / "sweep.json"
        sweep.write_text(json.dumps({"base": "base.json", "axes": {"strategy.nope": [1]}}))
        assert main(["sweep", str(sweep)]) == 2


class TestTable:
    def run_seeds(self, tmp_path, seeds, **over):
        cfg = blobs_cfg(tmp_path / "c.json", **over)
        assert main(["run", str(cfg), "--seeds", *map(str, seeds)]) == 0
        return tmp_path / "out"

    def test_single_run_cell(self, tmp_path, capsys):
        out = self.run_seeds(tmp_path, [0])
        capsys.readouterr()
        _, rows = read_results(out / "blobs-seed0.jsonl")
        rec = next(r for r in rows if r["round"] == 4)
        header, body = build_table(load_runs([out / "blobs-seed0.jsonl"]), [4])
        assert body[0][2] == f"{100 * rec['acc_avg_last3']:.1f}(0.0)"

    def test_identical_seeds_std_zero(self, tmp_path):
        out = self.run_seeds(tmp_path, [0])
        p = out / "blobs-seed0.jsonl"
        copy = out / "blobs-copy.jsonl"
        copy.write_bytes(p.read_bytes())
        _, body = build_table(load_runs([p, copy]), [4])
        assert body[0][2].endswith("(0.0)")

    def test_rounds_mode_unreached(self, tmp_path, capsys):
        out = self.run_seeds(tmp_path, [0, 1])
        capsys.readouterr()
        assert main(["table", str(out / "*.jsonl"), "--mode", "rounds", "--thresholds", "0.0", "1.01"]) == 0
        text = capsys.readouterr().out
        assert "--" in text.splitlines()[1]
        assert "1.0" in text.splitlines()[1]

    def test_regeneration_is_byte_identical(self, tmp_path, capsys):
        out = self.run_seeds(tmp_path, [0, 1])
        capsys.readouterr()
        main(["table", str(out / "*.jsonl"), "--rounds", "2", "4", "--csv", str(tmp_path / "a.csv")])
        first = capsys.readouterr().out
        main(["table", str(out / "*.jsonl"), "--rounds", "2", "4", "--csv", str(tmp_path / "b.csv")])
        assert capsys.readouterr().out == first
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_max_mode(self, tmp_path, capsys):
        out = self.run_seeds(tmp_path, [0])
        capsys.readouterr()
        _, rows = read_results(out / "blobs-seed0.jsonl")
        rec = next(r for r in rows if r["round"] == 4)
        _, body = build_table(load_runs([out / "blobs-seed0.jsonl"]), [4], mode="max")
        assert body[0][2] == f"{100 * rec['acc_max_last3']:.1f}(0.0)"

    def test_no_files_exit_2(self, tmp_path):
        assert main(["table", str(tmp_path / "*.jsonl"), "--rounds", "1"]) == 2


class TestListKeys:
    def test_lists_keys(self, capsys):
        assert main(["--list-keys"]) == 0
        keys = capsys.readouterr().out.split()
        assert "strategy.delta" in keys and "local.epochs" in keys
