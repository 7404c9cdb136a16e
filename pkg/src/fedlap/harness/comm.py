"""Per-round communication accounting in scalars and bytes."""

from __future__ import annotations

from ..strategies import ALGORITHMS

BYTES_PER_SCALAR = 8


def comm_cost(algorithm: str, P: int, C: int = 0, m_k: int = 0, m_total: int = 0) -> tuple[int, int]:
    """(scalars one client sends up, scalars the server sends that client) per round.

    Memory ids are bookkeeping and not counted; only model quantities are.
    FedADMM and FedDyn send w_k alone because the server replays the dual update.
    FedLap-Cov broadcasts S_g next to w_g, so its downlink is also 2P.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if algorithm == "fedlap-cov":
        return 2 * P, 2 * P
    if algorithm == "fedlap-func":
        return P + m_k * C, P + m_total * C
    return P, P


def round_cost(algorithm: str, P: int, clients: int, C: int = 0,
               memory_sizes: list[int] | None = None) -> tuple[list[int], list[int]]:
    """Per-client (up, down) scalar counts for one full round."""
    sizes = memory_sizes if memory_sizes is not None else [0] * clients
    m_total = sum(sizes)
    pairs = [comm_cost(algorithm, P, C, sizes[k], m_total) for k in range(clients)]
    return [u for u, _ in pairs], [d for _, d in pairs]
