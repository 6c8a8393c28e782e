"""Communication graph and Metropolis diffusion weights.

Edges are ordered pairs ``(i, j)`` meaning node j can transmit to node i.
Indicator matrices follow the same receiver-major convention: entry
``[i, j]`` concerns the packet sent by j and received by i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Graph:
    n: int
    edges: frozenset = frozenset()
    _adj: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        edges = frozenset((int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if i == j:
                raise ValueError(f"self edge ({i}, {j}); self membership is implicit")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
        object.__setattr__(self, "edges", edges)
        adj = np.zeros((self.n, self.n), dtype=bool)
        for i, j in edges:
            adj[i, j] = True
        adj.setflags(write=False)
        object.__setattr__(self, "_adj", adj)

    @property
    def adjacency(self) -> np.ndarray:
        """Boolean ``[i, j]`` = j transmits to i (diagonal False)."""
        return self._adj

    @property
    def in_degree(self) -> np.ndarray:
        """``|N_i|`` counting the node itself."""
        return self._adj.sum(axis=1) + 1

    def to_adjacency_list(self) -> dict[str, list[int]]:
        """``{receiver: [senders...]}`` with string keys for JSON."""
        return {str(i): sorted(int(j) for j in np.flatnonzero(self._adj[i])) for i in range(self.n)}

    @classmethod
    def from_adjacency_list(cls, n: int, adjacency: dict) -> "Graph":
        edges = {(int(i), int(j)) for i, senders in adjacency.items() for j in senders}
        return cls(n, frozenset(edges))

    @classmethod
    def from_matrix(cls, adj) -> "Graph":
        adj = np.asarray(adj, dtype=bool)
        n = adj.shape[0]
        edges = {(int(i), int(j)) for i, j in zip(*np.nonzero(adj)) if i != j}
        return cls(n, frozenset(edges))


def build_graph_from_positions(positions, comm_range: float) -> Graph:
    if comm_range <= 0:
        raise ValueError("comm_range must be positive")
    pos = np.asarray(positions, dtype=float)
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    adj = d <= comm_range
    np.fill_diagonal(adj, False)
    return Graph.from_matrix(adj)


def in_neighbors(g: Graph, i: int) -> set[int]:
    return {int(j) for j in np.flatnonzero(g.adjacency[i])} | {i}


def out_neighbors(g: Graph, i: int) -> set[int]:
    return {int(j) for j in np.flatnonzero(g.adjacency[:, i])} | {i}


def is_connected(g: Graph) -> bool:
    """Strong connectivity via reachability closure."""
    reach = g.adjacency | np.eye(g.n, dtype=bool)
    for _ in range(max(1, int(np.ceil(np.log2(max(g.n, 2)))))):
        reach = (reach.astype(np.int64) @ reach.astype(np.int64)) > 0
    return bool(reach.all())


def metropolis_weights(g: Graph, gamma_plus=None) -> np.ndarray:
    """Row-stochastic diffusion matrix under link failures.

    ``C[i, j] = gamma_plus[i, j] / max(|N_i|, |N_j|)`` for in-neighbors j != i,
    and the diagonal absorbs the remainder of the row. ``gamma_plus`` defaults
    to all links delivered.
    """
    adj = g.adjacency
    deg = g.in_degree
    if gamma_plus is None:
        mask = adj
    else:
        mask = adj & (np.asarray(gamma_plus) != 0)
    C = np.where(mask, 1.0 / np.maximum(deg[:, None], deg[None, :]), 0.0)
    np.fill_diagonal(C, 0.0)
    np.fill_diagonal(C, 1.0 - C.sum(axis=1))
    return C


def check_primitivity(C) -> bool:
    """True iff ``(C + I)^(N-1)`` is entrywise positive.

    Equivalent to irreducibility; with the positive diagonal that Metropolis
    weights always have it is also primitivity.
    """
    A = (np.asarray(C) > 0) | np.eye(len(C), dtype=bool)
    n = A.shape[0]
    reach = A.astype(np.int64)
    power = max(n - 1, 1)
    result = np.eye(n, dtype=np.int64)
    while power:
        if power & 1:
            result = np.minimum(result @ reach, 1)
        reach = np.minimum(reach @ reach, 1)
        power >>= 1
    return bool(result.all())
