"""Compressed adjacency graph used for partitioning and renumbering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class CellGraph:
    """Undirected graph in CSR adjacency form (``xadj``/``adjncy``).

    Neighbour lists are sorted ascending; edge weights are optional and
    default to one.
    """

    xadj: np.ndarray
    adjncy: np.ndarray
    eweights: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.xadj) - 1

    @property
    def n_edges(self) -> int:
        return len(self.adjncy) // 2

    def degree(self) -> np.ndarray:
        return np.diff(self.xadj)

    def neighbors(self, i: int) -> np.ndarray:
        return self.adjncy[self.xadj[i]:self.xadj[i + 1]]

    def edge_weights(self) -> np.ndarray:
        if self.eweights is None:
            return np.ones(len(self.adjncy), dtype=np.int64)
        return self.eweights

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Each undirected edge once, as (u, v) with u < v."""
        rows = np.repeat(np.arange(self.n_nodes), self.degree())
        keep = rows < self.adjncy
        return rows[keep], self.adjncy[keep]

    def subgraph(self, nodes: np.ndarray) -> CellGraph:
        """Induced subgraph on ``nodes``; node ``k`` of the result is ``nodes[k]``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(self.n_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        rows = np.repeat(np.arange(self.n_nodes), self.degree())
        lr = local[rows]
        lc = local[self.adjncy]
        keep = (lr >= 0) & (lc >= 0)
        w = None if self.eweights is None else self.eweights[keep]
        return from_edge_list(len(nodes), lr[keep], lc[keep], w, symmetric=True)


def from_edge_list(n: int, u: np.ndarray, v: np.ndarray, w: np.ndarray | None = None,
                   symmetric: bool = False) -> CellGraph:
    """Build a graph from an edge list.

    With ``symmetric=False`` every (u, v) is inserted in both directions.
    Self-loops are dropped and duplicate edges merged (weights summed).
    """
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    if w is None:
        w = np.ones(len(u), dtype=np.int64)
    else:
        w = np.asarray(w)
    if not symmetric:
        u, v, w = np.concatenate([u, v]), np.concatenate([v, u]), np.concatenate([w, w])
    keep = u != v
    u, v, w = u[keep], v[keep], w[keep]
    key = u * n + v
    uniq, inv = np.unique(key, return_inverse=True)
    wsum = np.bincount(inv, weights=w, minlength=len(uniq))
    rows = uniq // n
    cols = uniq % n
    xadj = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=xadj[1:])
    weights = wsum.astype(np.int64)
    return CellGraph(xadj, cols.astype(np.int64), None if np.all(weights == 1) else weights)


def bandwidth(graph: CellGraph, order: np.ndarray | None = None) -> int:
    """Matrix bandwidth max |p(u) - p(v)| over edges, with ``p = order`` (old -> new)."""
    u, v = graph.edges()
    if len(u) == 0:
        return 0
    if order is not None:
        order = np.asarray(order)
        u, v = order[u], order[v]
    return int(np.max(np.abs(u - v)))
