"""Matrices as bipartite graphs.

A matrix ``M`` (m x n) is the König digraph with ``m`` row nodes, ``n`` column
nodes and one weighted edge per nonzero entry. The network input is the
augmented line digraph (:class:`FactorGraph`): complete bipartite, with the rows
of ``W`` and ``H`` as node features and the entries of ``V`` as edge features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when matrix shapes are inconsistent."""


def as_matrix(M, name="matrix") -> np.ndarray:
    """Validate and return ``M`` as a read-only 2-D float64 array.

    Raises
    ------
    ValueError
        If ``M`` is not 2-D, has an empty dimension or contains NaN/Inf.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if A.shape[0] < 1 or A.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {A.shape}")
    if not np.isfinite(A).all():
        raise ValueError(f"{name} contains non-finite values")
    A.setflags(write=False)
    return A


@dataclass(frozen=True)
class KonigDigraph:
    """Weighted bipartite digraph from ``num_row_nodes`` row nodes to
    ``num_col_nodes`` column nodes. ``edges`` is a coordinate list of
    ``(row, col, weight)`` triples sorted by (row, col)."""

    num_row_nodes: int
    num_col_nodes: int
    edges: tuple

    def __post_init__(self):
        seen = set()
        for i, j, w in self.edges:
            if not (0 <= i < self.num_row_nodes and 0 <= j < self.num_col_nodes):
                raise IndexError(f"edge ({i}, {j}) out of range")
            if w == 0 or not np.isfinite(w):
                raise ValueError(f"edge ({i}, {j}) has invalid weight {w}")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))

    def out_edges(self, i):
        return [(j, w) for (s, j, w) in self.edges if s == i]


@dataclass(frozen=True)
class FactorGraph:
    """Augmented line digraph of ``V ~ W H^T``."""

    row_features: np.ndarray
    col_features: np.ndarray
    edge_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.row_features.shape[1]

    @property
    def num_row_nodes(self) -> int:
        return self.row_features.shape[0]

    @property
    def num_col_nodes(self) -> int:
        return self.col_features.shape[0]


def matrix_to_konig(M) -> KonigDigraph:
    M = as_matrix(M)
    rows, cols = np.nonzero(M)
    edges = tuple((int(i), int(j), float(M[i, j])) for i, j in zip(rows, cols))
    return KonigDigraph(M.shape[0], M.shape[1], edges)


def konig_to_matrix(G: KonigDigraph) -> np.ndarray:
    M = np.zeros((G.num_row_nodes, G.num_col_nodes))
    for i, j, w in G.edges:
        M[i, j] = w
    return M


def reverse_edges(G: KonigDigraph) -> KonigDigraph:
    """Graph of the transposed matrix."""
    edges = tuple(sorted((j, i, w) for i, j, w in G.edges))
    return KonigDigraph(G.num_col_nodes, G.num_row_nodes, edges)


def concat_path_weight(GW: KonigDigraph, GH: KonigDigraph, i: int, j: int) -> float:
    """Sum of path weights from row node ``i`` of ``GW`` to column node ``j`` of
    ``GH`` in the graph obtained by gluing ``GW``'s column nodes to ``GH``'s row
    nodes. With ``GH`` the graph of ``H^T`` this is ``(W H^T)[i, j]``.
    """
    if GW.num_col_nodes != GH.num_row_nodes:
        raise DimensionError(
            f"cannot glue {GW.num_col_nodes} column nodes to {GH.num_row_nodes} row nodes"
        )
    if not 0 <= i < GW.num_row_nodes:
        raise IndexError(f"row node {i} out of range")
    if not 0 <= j < GH.num_col_nodes:
        raise IndexError(f"column node {j} out of range")
    second_hop = {c: w for (c, t, w) in GH.edges if t == j}
    total = 0.0
    for c, w in GW.out_edges(i):
        if c in second_hop:
            total += w * second_hop[c]
    return total


def build_factor_graph(V, W, H) -> FactorGraph:
    V = as_matrix(V, "V")
    W = as_matrix(W, "W")
    H = as_matrix(H, "H")
    if W.shape[1] != H.shape[1]:
        raise DimensionError(f"rank mismatch: W has {W.shape[1]} columns, H has {H.shape[1]}")
    if W.shape[0] != V.shape[0] or H.shape[0] != V.shape[1]:
        raise DimensionError(
            f"V is {V.shape} but W is {W.shape} and H is {H.shape}"
        )
    return FactorGraph(W, H, V)


def residual(G: FactorGraph) -> np.ndarray:
    """Per-edge residual ``W H^T - V``."""
    return G.row_features @ G.col_features.T - G.edge_values
