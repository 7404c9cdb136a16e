"""Round orchestration, transports, accounting, oracle and result files."""

from .comm import BYTES_PER_SCALAR, comm_cost, round_cost
from .config import (DatasetConfig, ExperimentConfig, ModelConfig, SplitConfig, TransportConfig,
                     apply_overrides, load_config, valid_keys)
from .oracle import OracleResult, centralized_oracle
from .problem import Problem, build_problem, client_rng
from .runner import (ClientWorker, InProcessTransport, RoundRecord, read_results, rounds_to_accuracy,
                     run_experiment, run_seed, write_results, write_seed)
from .tcp import TcpServer, tcp_client
from .wire import decode_msg, encode_msg, recv_msg, send_msg

__all__ = [
    "BYTES_PER_SCALAR", "ClientWorker", "DatasetConfig", "ExperimentConfig", "InProcessTransport",
    "ModelConfig", "OracleResult", "Problem", "RoundRecord", "SplitConfig", "TcpServer",
    "TransportConfig", "apply_overrides", "build_problem", "centralized_oracle", "client_rng",
    "comm_cost", "decode_msg", "encode_msg", "load_config", "read_results", "recv_msg",
    "round_cost", "rounds_to_accuracy", "run_experiment", "run_seed", "send_msg", "tcp_client",
    "valid_keys", "write_results", "write_seed",
]
