import json
import logging
import socket
import threading

import numpy as np
import pytest

from fedlap.data import quadratic_optimum
from fedlap.errors import ConfigError, StrategyError
from fedlap.harness import (ExperimentConfig, InProcessTransport, TcpServer, apply_overrides,
                            build_problem, centralized_oracle, comm_cost, load_config, read_results,
                            rounds_to_accuracy, run_experiment, run_seed, tcp_client, write_seed)
from fedlap.harness.runner import make_workers
from fedlap.harness.wire import send_msg
from fedlap.strategies import ClientMsg


def quad_cfg(**over):
    d = {"name": "quad", "dataset": {"kind": "quadratic-clients", "params": {"clients": 4, "dim": 8}},
         "strategy": {"algorithm": "fedlap", "rho": 0.25, "local_solver": "exact"}, "rounds": 6}
    d.update(over)
    return ExperimentConfig.from_dict(d)


def blobs_cfg(algorithm="fedlap", **over):
    d = {"name": "blobs",
         "dataset": {"kind": "gaussian-blobs", "params": {"points": 300, "dim": 3, "class_count": 3,
                                                          "separation": 3.0}},
         "split": {"kind": "dirichlet", "clients": 4, "alpha1": 1.0, "alpha2": 0.5},
         "model": {"kind": "softmax-linear"},
         "strategy": {"algorithm": algorithm, "delta": 1.0, "memory_per_class": 1,
                      "server_opt": {"learning_rate": 0.05, "epochs": 50}},
         "local": {"learning_rate": 0.05, "epochs": 3, "batch_size": 16},
         "rounds": 5}
    d.update(over)
    return ExperimentConfig.from_dict(d)


class TestConfig:
    def test_unknown_key_lists_valid_keys(self):
        with pytest.raises(ConfigError, match="valid keys") as e:
            ExperimentConfig.from_dict({"roundz": 3})
        assert "rounds" in str(e.value)

    def test_unknown_override(self):
        with pytest.raises(ConfigError, match="strategy.delta"):
            apply_overrides({}, ["strategy.deltaa=1"])

    def test_override_parses_json(self):
        d = apply_overrides({}, ["strategy.delta=0.1", "seeds=[1,2]", "name=abc", "dataset.params.dim=3"])
        assert d == {"strategy": {"delta": 0.1}, "seeds": [1, 2], "name": "abc", "dataset": {"params": {"dim": 3}}}

    def test_all_problems_reported(self):
        with pytest.raises(ConfigError) as e:
            ExperimentConfig.from_dict({"rounds": -1, "eval_every": 0, "split": {"kind": "nope"}})
        msg = str(e.value)
        assert "rounds" in msg and "eval_every" in msg and "split.kind" in msg

    def test_func_needs_a_model(self):
        with pytest.raises(ConfigError, match="fedlap-func"):
            quad_cfg(strategy={"algorithm": "fedlap-func"})

    def test_func_needs_memory(self):
        with pytest.raises(ConfigError, match="memory_per_class"):
            blobs_cfg(strategy={"algorithm": "fedlap-func", "memory_per_class": 0})

    def test_exact_solver_rejects_mlp(self):
        with pytest.raises(ConfigError, match="convex"):
            blobs_cfg(model={"kind": "mlp"}, strategy={"local_solver": "exact"})

    def test_header_round_trip(self, tmp_path):
        cfg = blobs_cfg()
        path, ok = write_seed(cfg, 0, tmp_path)
        head, _ = read_results(path)
        assert ok
        assert ExperimentConfig.from_dict(head["config"]) == cfg

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")

    def test_load_with_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(quad_cfg().to_dict()))
        cfg = load_config(p, ["rounds=2"])
        assert cfg.rounds == 2


class TestRunner:
    def test_zero_rounds(self):
        recs = list(run_seed(quad_cfg(rounds=0), 0))
        assert len(recs) == 1 and recs[0]["round"] == 0

    def test_worker_count_does_not_change_results(self, tmp_path, monkeypatch):
        cfg = blobs_cfg()
        monkeypatch.setenv("FEDLAP_WORKERS", "1")
        p1, _ = write_seed(cfg, 0, tmp_path / "a")
        monkeypatch.setenv("FEDLAP_WORKERS", "8")
        p8, _ = write_seed(cfg, 0, tmp_path / "b")
        assert p1.read_bytes() == p8.read_bytes()

    def test_client_order_does_not_change_results(self):
        cfg = blobs_cfg(rounds=3)
        problem = build_problem(cfg, 0)
        fwd = list(run_seed(cfg, 0, problem=problem,
                            transport=InProcessTransport(make_workers(cfg, problem, 0))))
        problem = build_problem(cfg, 0)
        rev = list(run_seed(cfg, 0, problem=problem,
                            transport=InProcessTransport(make_workers(cfg, problem, 0), order=[3, 1, 0, 2])))
        assert fwd == rev

    def test_cadence_does_not_change_shared_rounds(self):
        every = {r["round"]: r for r in run_seed(blobs_cfg(rounds=10, eval_every=1), 0)}
        sparse = list(run_seed(blobs_cfg(rounds=10, eval_every=5), 0))
        assert [r["round"] for r in sparse] == [0, 5, 10]
        for r in sparse:
            assert r == every[r["round"]]

    @pytest.mark.parametrize("alg", ["fedlap", "fedlap-cov", "fedlap-func", "fedavg", "feddyn"])
    def test_bytes_match_comm_cost(self, alg):
        cfg = blobs_cfg(alg, rounds=3)
        problem = build_problem(cfg, 0)
        P, C, K = problem.dim, problem.model.class_count, problem.clients
        mem = problem.setup.memory
        for r in run_seed(cfg, 0, problem=problem):
            if r["round"] == 0:
                continue
            for k in range(K):
                m_k = len(mem.rows_of(k)) if mem is not None else 0
                m_tot = len(mem) if mem is not None else 0
                up, down = comm_cost(alg, P, C, m_k, m_tot)
                assert r["scalars_up"][k] == up
                assert r["scalars_down"][k] == down
            assert r["bytes_up"] == 8 * sum(r["scalars_up"])
            assert r["bytes_down"] == 8 * sum(r["scalars_down"])

    def test_trailing_accuracy(self):
        recs = list(run_seed(blobs_cfg(rounds=4), 0))
        acc = {r["round"]: r["test_accuracy"] for r in recs}
        assert recs[0]["acc_avg_last3"] == acc[0]
        assert recs[1]["acc_avg_last3"] == acc[1]
        assert recs[2]["acc_avg_last3"] == pytest.approx((acc[1] + acc[2]) / 2)
        assert recs[4]["acc_avg_last3"] == pytest.approx((acc[2] + acc[3] + acc[4]) / 3)
        assert recs[4]["acc_max_last3"] == max(acc[2], acc[3], acc[4])

    def test_wall_ms_only_when_timing(self):
        assert all(r["wall_ms"] is None for r in run_seed(quad_cfg(rounds=2), 0))
        timed = list(run_seed(quad_cfg(rounds=2, timing=True), 0))
        assert timed[1]["wall_ms"] >= 0

    def test_strategy_error_records_failure(self):
        class Broken:
            def exchange(self, msg):
                raise StrategyError("boom")

            def close(self):
                pass

        recs = list(run_seed(quad_cfg(), 0, transport=Broken()))
        assert recs[-1]["type"] == "failure" and recs[-1]["round"] == 1
        assert "boom" in recs[-1]["error"]

    def test_run_experiment_streams_headers_per_seed(self):
        recs = list(run_experiment(quad_cfg(rounds=1, seeds=[0, 1])))
        assert [r["type"] for r in recs] == ["header", "round", "round"] * 2

    def test_quadratic_converges_to_oracle(self):
        cfg = quad_cfg(rounds=200)
        w_star = centralized_oracle(cfg).w
        errs = []
        list(run_seed(cfg, 0, on_round=lambda r, g: errs.append(np.abs(g.w_g - w_star).max())))
        assert min(errs) <= 1e-6


class TestRoundsToAccuracy:
    def test_reached(self):
        assert rounds_to_accuracy([0.7, 0.8, 0.9], 0.85) == 3

    def test_unreached(self):
        assert rounds_to_accuracy([0.7, 0.8, 0.9], 0.95) is None

    def test_tie_counts(self):
        assert rounds_to_accuracy([0.7, 0.8, 0.9], 0.8) == 2

    def test_records_skip_round_zero(self):
        recs = [{"type": "round", "round": 0, "test_accuracy": 0.99},
                {"type": "round", "round": 5, "test_accuracy": 0.9}]
        assert rounds_to_accuracy(recs, 0.85) == 5


class TestOracle:
    def test_quadratic_normal_equations(self):
        cfg = quad_cfg()
        p = build_problem(cfg, 0)
        H = np.eye(8) + sum(s.A.T @ s.A for s in p.shards)
        g = sum(s.A.T @ s.b for s in p.shards)
        np.testing.assert_allclose(centralized_oracle(cfg).w, np.linalg.solve(H, g), atol=1e-10)
        np.testing.assert_array_equal(centralized_oracle(cfg).w, quadratic_optimum(p.shards, 1.0))

    def test_huge_delta_shrinks_to_zero(self):
        res = centralized_oracle(blobs_cfg(), delta=1e12)
        assert np.abs(res.w).max() <= 1e-6

    def test_reports_test_metrics(self):
        res = centralized_oracle(blobs_cfg())
        assert 0 <= res.test_accuracy <= 1 and res.test_nll > 0


def _serve_in_thread(server, seed, out_dir):
    box = {}

    def target():
        try:
            box["result"] = server.serve_seed(seed, out_dir)
        except Exception as e:  # surfaced by the test
            box["error"] = e
    t = threading.Thread(target=target)
    t.start()
    return t, box


class TestTcp:
    def test_matches_in_process(self, tmp_path):
        cfg = quad_cfg(rounds=8, dataset={"kind": "quadratic-clients", "params": {"clients": 2, "dim": 8}})
        local_path, _ = write_seed(cfg, 0, tmp_path / "inproc")
        with TcpServer(cfg, port=0, timeout=10) as server:
            host, port = server.address
            t, box = _serve_in_thread(server, 0, tmp_path / "tcp")
            clients = [threading.Thread(target=tcp_client, args=(cfg, k, host, port, [0], 10))
                       for k in (1, 0)]
            for c in clients:
                c.start()
            for c in clients:
                c.join()
            t.join()
        assert "error" not in box
        assert box["result"][0].read_bytes() == local_path.read_bytes()

    def test_func_matches_in_process(self, tmp_path):
        cfg = blobs_cfg("fedlap-func", rounds=2, split={"kind": "homogeneous", "clients": 2})
        local_path, _ = write_seed(cfg, 0, tmp_path / "inproc")
        with TcpServer(cfg, port=0, timeout=10) as server:
            host, port = server.address
            t, box = _serve_in_thread(server, 0, tmp_path / "tcp")
            clients = [threading.Thread(target=tcp_client, args=(cfg, k, host, port, [0], 10))
                       for k in (0, 1)]
            for c in clients:
                c.start()
            for c in clients:
                c.join()
            t.join()
        assert box["result"][0].read_bytes() == local_path.read_bytes()

    def test_duplicate_id_rejected(self, tmp_path, caplog):
        cfg = quad_cfg(rounds=1, dataset={"kind": "quadratic-clients", "params": {"clients": 2, "dim": 3}})
        with TcpServer(cfg, port=0, timeout=5) as server:
            host, port = server.address
            t, box = _serve_in_thread(server, 0, tmp_path)
            first = socket.create_connection((host, port))
            send_msg(first, ClientMsg(client_id=0, round=0))
            dup = socket.create_connection((host, port))
            send_msg(dup, ClientMsg(client_id=0, round=0))
            dup.settimeout(5)
            assert dup.recv(1) == b""  # closed by the server
            dup.close()
            other = threading.Thread(target=tcp_client, args=(cfg, 1, host, port, [0], 5))
            other.start()
            # play client 0 by hand: one round, then the server hangs up
            from fedlap.harness.wire import recv_msg
            first.settimeout(5)
            g = recv_msg(first)
            send_msg(first, ClientMsg(client_id=0, round=g.round, v=np.zeros(3)))
            assert recv_msg(first) is None
            first.close()
            other.join()
            t.join()
        assert "duplicate client id 0" in caplog.text

    def test_malformed_frame_closes_connection(self, tmp_path, caplog):
        caplog.set_level(logging.ERROR)
        cfg = quad_cfg(rounds=1, dataset={"kind": "quadratic-clients", "params": {"clients": 1, "dim": 3}})
        with TcpServer(cfg, port=0, timeout=5) as server:
            host, port = server.address
            t, box = _serve_in_thread(server, 0, tmp_path)
            bad = socket.create_connection((host, port))
            bad.sendall(b"\x00\x00\x00\x05\x09\x00\x00\x00\x00")
            bad.settimeout(5)
            assert bad.recv(1) == b""
            bad.close()
            tcp_client(cfg, 0, host, port, [0], 5)
            t.join()
        assert "malformed" in caplog.text
        assert box["result"][1]

    def test_missing_clients_time_out(self, tmp_path):
        cfg = quad_cfg(rounds=1, dataset={"kind": "quadratic-clients", "params": {"clients": 2, "dim": 3}})
        with TcpServer(cfg, port=0, timeout=0.3) as server:
            with pytest.raises(Exception, match="clients connected"):
                server.serve_seed(0, tmp_path)
