"""Run the round loop over TCP, one blocking connection per client.

Session: a client connects and sends a hello, which is a ClientMsg at round 0
carrying only its id.  Once all K clients are in, each round the server sends
the GlobalMsg to every client and reads one ClientMsg back from each.  The
server closes every connection when the seed is done.  Clients rebuild their
shard and the memory set from the shared config, so only messages cross the wire.
"""

from __future__ import annotations

import logging
import socket
import time

from ..errors import TransportError, WireError
from ..strategies import ClientMsg, GlobalMsg
from .config import ExperimentConfig
from .problem import build_problem
from .runner import ClientWorker, write_seed
from .wire import recv_msg, send_msg

log = logging.getLogger(__name__)


class TcpServerTransport:
    def __init__(self, conns: dict[int, socket.socket], timeout: float):
        self.conns = dict(sorted(conns.items()))
        self.timeout = timeout

    def exchange(self, msg: GlobalMsg) -> list[ClientMsg]:
        for k, conn in self.conns.items():
            try:
                send_msg(conn, msg)
            except OSError as e:
                raise TransportError(f"lost client {k}: {e}") from None
        out = []
        for k, conn in self.conns.items():
            try:
                reply = recv_msg(conn)
            except socket.timeout:
                raise TransportError(f"client {k} idle for {self.timeout:g}s") from None
            except WireError as e:
                log.error("malformed frame from client %d: %s", k, e)
                raise TransportError(f"malformed frame from client {k}: {e}") from None
            except OSError as e:
                raise TransportError(f"lost client {k}: {e}") from None
            if reply is None:
                raise TransportError(f"client {k} disconnected")
            if not isinstance(reply, ClientMsg) or reply.client_id != k or reply.round != msg.round:
                raise TransportError(f"unexpected reply on client {k}'s connection")
            out.append(reply)
        return out

    def close(self):
        for conn in self.conns.values():
            try:
                conn.close()
            except OSError:
                pass
        self.conns = {}


class TcpServer:
    """Listening socket plus the per-seed accept and round loop."""

    def __init__(self, cfg: ExperimentConfig, host: str | None = None, port: int | None = None,
                 timeout: float | None = None):
        self.cfg = cfg
        t = cfg.transport
        self.timeout = t.timeout if timeout is None else timeout
        self.sock = socket.create_server((host or t.host, t.port if port is None else port))
        self.sock.settimeout(self.timeout)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept_clients(self, K: int) -> TcpServerTransport:
        """Wait for K distinct client ids; bad hellos are dropped and logged."""
        conns: dict[int, socket.socket] = {}
        try:
            while len(conns) < K:
                try:
                    conn, addr = self.sock.accept()
                except socket.timeout:
                    raise TransportError(f"only {len(conns)} of {K} clients connected "
                                         f"within {self.timeout:g}s") from None
                conn.settimeout(self.timeout)
                try:
                    hello = recv_msg(conn)
                except (WireError, OSError) as e:
                    log.error("closing connection from %s: malformed hello (%s)", addr, e)
                    conn.close()
                    continue
                reason = None
                if not isinstance(hello, ClientMsg) or hello.round != 0:
                    reason = "first frame is not a round-0 hello"
                elif not 0 <= hello.client_id < K:
                    reason = f"client id {hello.client_id} outside 0..{K - 1}"
                elif hello.client_id in conns:
                    reason = f"duplicate client id {hello.client_id}"
                if reason:
                    log.error("rejecting connection from %s: %s", addr, reason)
                    conn.close()
                    continue
                conns[hello.client_id] = conn
        except BaseException:
            for c in conns.values():
                c.close()
            raise
        return TcpServerTransport(conns, self.timeout)

    def serve_seed(self, seed: int, out_dir=None):
        problem = build_problem(self.cfg, seed)
        transport = self.accept_clients(problem.clients)
        try:
            return write_seed(self.cfg, seed, out_dir, transport=transport, problem=problem)
        finally:
            transport.close()

    def serve(self, out_dir=None):
        """All seeds in order; stops at the first failed seed.  Returns (paths, ok)."""
        paths = []
        for seed in self.cfg.seeds:
            path, ok = self.serve_seed(seed, out_dir)
            paths.append(path)
            if not ok:
                return paths, False
        return paths, True

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _connect(host: str, port: int, timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except OSError:
            if time.monotonic() > deadline:
                raise TransportError(f"could not reach {host}:{port} within {timeout:g}s") from None
            time.sleep(0.05)


def tcp_client(cfg: ExperimentConfig, client_id: int, host: str | None = None,
               port: int | None = None, seeds=None, timeout: float | None = None) -> int:
    """Serve one client for each seed in turn; returns the number of rounds answered."""
    t = cfg.transport
    host = host or t.host
    port = t.port if port is None else port
    timeout = t.timeout if timeout is None else timeout
    strategy, local = cfg.strategy_config, cfg.local_config
    answered = 0
    for seed in (cfg.seeds if seeds is None else seeds):
        problem = build_problem(cfg, seed)
        if not 0 <= client_id < problem.clients:
            raise TransportError(f"client id {client_id} outside 0..{problem.clients - 1}")
        worker = ClientWorker(strategy, problem.setup, client_id, problem.shards[client_id], local,
                              seed, problem.dim)
        with _connect(host, port, timeout) as conn:
            conn.settimeout(timeout)
            send_msg(conn, ClientMsg(client_id=client_id, round=0))
            first = True
            while True:
                try:
                    msg = recv_msg(conn)
                except socket.timeout:
                    raise TransportError(f"server idle for {timeout:g}s") from None
                except ConnectionError as e:
                    raise TransportError(f"lost the server: {e}") from None
                if msg is None:
                    if first and cfg.rounds > 0:
                        raise TransportError(f"server closed the session for client {client_id} "
                                             "before round 1 (rejected?)")
                    break
                first = False
                if not isinstance(msg, GlobalMsg):
                    raise TransportError("server sent a client message")
                send_msg(conn, worker.handle(msg))
                answered += 1
    return answered
