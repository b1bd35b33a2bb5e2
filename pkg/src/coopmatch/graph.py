"""Weighted communication digraphs with a leader node.

Node 0 is the leader; nodes ``1..N`` are followers.  ``adjacency[i, j] > 0``
means follower ``i`` receives information from node ``j`` (an edge ``j -> i``).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.typing import NDArray

from .errors import NotConnected

SYMMETRY_TOL = 1e-12
POSDEF_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Digraph:
    """Weighted digraph over nodes ``0..N``.

    Args:
        adjacency: ``(N+1, N+1)`` matrix of non-negative weights ``a_ij``.
    """

    adjacency: NDArray[np.float64]

    def __post_init__(self) -> None:
        a = np.array(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 2:
            raise ValueError(f"adjacency must be square with at least 2 nodes, got shape {a.shape}")
        if np.any(a < 0):
            raise ValueError("adjacency weights must be non-negative")
        if np.any(np.diag(a) != 0):
            raise ValueError("self-loops are not allowed (a_ii must be 0)")
        if np.any(a[0] != 0):
            raise ValueError("the leader (node 0) cannot receive information (a_0j must be 0)")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @classmethod
    def from_edges(cls, n_followers: int, edges: Iterable[tuple[int, int, float]]) -> "Digraph":
        """Build a graph from ``(source, target, weight)`` triples.

        An edge ``(j, i, w)`` lets node ``i`` read node ``j``, i.e. sets ``a_ij = w``.
        """
        n = n_followers + 1
        a = np.zeros((n, n))
        for src, dst, weight in edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise ValueError(f"edge ({src}, {dst}) references a node outside 0..{n - 1}")
            a[dst, src] = weight
        return cls(a)

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_followers(self) -> int:
        return self.node_count - 1

    def edges(self) -> list[tuple[int, int, float]]:
        """Edge list ``(source, target, weight)`` sorted by target then source."""
        out = []
        for i in range(self.node_count):
            for j in range(self.node_count):
                if self.adjacency[i, j] > 0:
                    out.append((j, i, float(self.adjacency[i, j])))
        return out

    def in_neighbors(self, i: int) -> dict[int, float]:
        """Nodes that agent ``i`` reads, mapped to their weights."""
        row = self.adjacency[i]
        return {int(j): float(row[j]) for j in np.flatnonzero(row > 0)}

    def without_edge(self, src: int, dst: int) -> "Digraph":
        a = self.adjacency.copy()
        a[dst, src] = 0.0
        return Digraph(a)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Digraph):
            return NotImplemented
        return np.array_equal(self.adjacency, other.adjacency)

    def __hash__(self) -> int:
        return hash(self.adjacency.tobytes())


@dataclass(frozen=True, eq=False)
class LaplacianDecomposition:
    full_laplacian: NDArray[np.float64]
    follower_submatrix: NDArray[np.float64]
    # descending; empty when H is not symmetric
    eigenvalues: tuple[float, ...]
    symmetric: bool


def build_laplacian(g: Digraph) -> LaplacianDecomposition:
    a = g.adjacency
    lap = np.diag(a.sum(axis=1)) - a
    h = lap[1:, 1:].copy()
    symmetric = bool(np.max(np.abs(h - h.T), initial=0.0) <= SYMMETRY_TOL)
    eigs: tuple[float, ...] = ()
    if symmetric:
        eigs = tuple(float(x) for x in np.sort(np.linalg.eigvalsh(h))[::-1])
    return LaplacianDecomposition(lap, h, eigs, symmetric)


def is_connected(g: Digraph) -> bool:
    """Leader reachable from every follower and follower subgraph undirected."""
    a = g.adjacency
    followers = a[1:, 1:]
    if np.max(np.abs(followers - followers.T), initial=0.0) > SYMMETRY_TOL:
        return False
    # information flows j -> i when a_ij > 0; walk forward from the leader
    seen = {0}
    queue = deque([0])
    while queue:
        j = queue.popleft()
        for i in np.flatnonzero(a[:, j] > 0):
            i = int(i)
            if i not in seen:
                seen.add(i)
                queue.append(i)
    return len(seen) == g.node_count


def min_eigenvalue(dec: LaplacianDecomposition) -> float:
    """Smallest eigenvalue ``lambda_N`` of H.

    Raises:
        NotConnected: H is not symmetric positive definite.
    """
    if not dec.symmetric or not dec.eigenvalues:
        raise NotConnected("follower submatrix H is not symmetric")
    lam = dec.eigenvalues[-1]
    if lam <= POSDEF_TOL:
        raise NotConnected(f"follower submatrix H is not positive definite (lambda_min = {lam:.3e})")
    return lam


def fig1_graph() -> Digraph:
    """Three-follower example topology: 0->1, 1<->2, 0->3, unit weights."""
    return Digraph.from_edges(3, [(0, 1, 1.0), (1, 2, 1.0), (2, 1, 1.0), (0, 3, 1.0)])
