"""
Spectral partitioning of the grid connectivity graph.

Sections are produced by repeatedly splitting every component on the sign of
its Fiedler vector, the eigenvector of the second-smallest Laplacian
eigenvalue.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from utils.errors import ConnectivityError, DataError
from utils.logger import get_logger

logger = get_logger("Partitioner")

DENSE_LIMIT = 64
CONNECTED_TOL = 1e-10
SIGN_TOL = 1e-12


@dataclass(frozen=True)
class ConnectivityGraph:
    """Undirected bus graph on nodes 0..n-1; duplicate edges are collapsed."""
    n: int
    edges: tuple = ()
    coordinates: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n < 0:
            raise DataError(f"Node count must be non-negative, got {self.n}")
        collapsed = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise DataError(f"Self-loop on node {a}")
            if not (0 <= a < self.n and 0 <= b < self.n):
                raise DataError(f"Edge ({a}, {b}) references a node outside 0..{self.n - 1}")
            collapsed.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", tuple(sorted(collapsed)))

    def to_networkx(self) -> nx.Graph:
        G = nx.Graph()
        G.add_nodes_from(range(self.n))
        G.add_edges_from(self.edges)
        return G

    def subgraph(self, nodes: Iterable[int]) -> tuple["ConnectivityGraph", list[int]]:
        """Induced subgraph relabelled to 0..k-1, plus the original label of each new node."""
        labels = sorted(int(v) for v in nodes)
        index = {v: i for i, v in enumerate(labels)}
        edges = [(index[a], index[b]) for a, b in self.edges if a in index and b in index]
        return ConnectivityGraph(len(labels), tuple(edges)), labels


@dataclass(frozen=True)
class PartitionResult:
    assignment: np.ndarray
    sections: list
    section_adjacency: dict

    @property
    def n_sections(self) -> int:
        return len(self.sections)


def laplacian(graph: ConnectivityGraph, sparse: bool = False):
    """L = D − A."""
    if graph.n < 1:
        raise DataError("Laplacian of an empty graph")
    L = nx.laplacian_matrix(graph.to_networkx(), nodelist=range(graph.n)).astype(float)
    return L.tocsc() if sparse else L.toarray()


def connected_components(graph: ConnectivityGraph) -> list[list[int]]:
    """Components as sorted node lists, ordered by their smallest node."""
    comps = [sorted(c) for c in nx.connected_components(graph.to_networkx())]
    return sorted(comps, key=lambda c: c[0])


def _fix_sign(v: np.ndarray) -> np.ndarray:
    significant = np.flatnonzero(np.abs(v) >= SIGN_TOL)
    if significant.size and v[significant[0]] < 0:
        return -v
    return v


def fiedler_vector(L) -> tuple[float, np.ndarray]:
    """
    Second-smallest eigenpair of a Laplacian.

    Dense ``eigh`` for n ≤ 64, shift-invert Lanczos (``eigsh``) above. The
    vector is projected off the constant vector, normalized, and signed so
    its first significant entry is positive.

    Raises
    ------
    ConnectivityError
        If λ₂ ≤ 1e-10 (disconnected graph).
    """
    n = L.shape[0]
    if n < 2:
        raise ConnectivityError("Fiedler vector needs at least 2 nodes")
    if n <= DENSE_LIMIT or not scipy.sparse.issparse(L):
        dense = L.toarray() if scipy.sparse.issparse(L) else np.asarray(L, dtype=float)
        if n <= DENSE_LIMIT:
            values, vectors = scipy.linalg.eigh(dense, subset_by_index=[0, 1])
        else:
            values, vectors = scipy.sparse.linalg.eigsh(scipy.sparse.csc_matrix(dense), k=2, sigma=-1e-3,
                                                        which="LM", v0=np.linspace(1.0, 2.0, n))
    else:
        values, vectors = scipy.sparse.linalg.eigsh(L.tocsc(), k=2, sigma=-1e-3, which="LM",
                                                    v0=np.linspace(1.0, 2.0, n))
    order = np.argsort(values)
    lam, v = float(values[order[1]]), vectors[:, order[1]]
    if lam <= CONNECTED_TOL:
        raise ConnectivityError(f"Graph is disconnected (λ₂={lam:.3g}); split components first")
    v = v - v.mean()
    v = v / np.linalg.norm(v)
    return lam, _fix_sign(v)


def bisect(graph: ConnectivityGraph) -> tuple[list[int], list[int]]:
    """
    Split on the Fiedler sign: A = {v_i > 0}, B = {v_i ≤ 0}; |v_i| < 1e-12 counts as non-positive.

    Raises
    ------
    ConnectivityError
        If the graph has fewer than 2 nodes or is disconnected.
    """
    if graph.n < 2:
        raise ConnectivityError("Cannot bisect a graph with fewer than 2 nodes")
    if not nx.is_connected(graph.to_networkx()):
        raise ConnectivityError("Cannot bisect a disconnected graph; split components first")
    _, v = fiedler_vector(laplacian(graph, sparse=graph.n > DENSE_LIMIT))
    positive = v >= SIGN_TOL
    return np.flatnonzero(positive).tolist(), np.flatnonzero(~positive).tolist()


def _split(graph: ConnectivityGraph, section: Sequence[int]) -> list[list[int]]:
    sub, labels = graph.subgraph(section)
    side_a, side_b = bisect(sub)
    pieces = []
    for side in (side_a, side_b):
        side_graph, side_labels = sub.subgraph(side)
        for comp in connected_components(side_graph):
            pieces.append(sorted(labels[side_labels[i]] for i in comp))
    return pieces


def section_adjacency(graph: ConnectivityGraph, assignment: np.ndarray) -> dict:
    counts: dict[tuple[int, int], int] = {}
    for a, b in graph.edges:
        sa, sb = int(assignment[a]), int(assignment[b])
        if sa != sb:
            key = (min(sa, sb), max(sa, sb))
            counts[key] = counts.get(key, 0) + 1
    return dict(sorted(counts.items()))


def partition(graph: ConnectivityGraph, depth: int, min_size: int = 2,
              max_size: int | None = None) -> PartitionResult:
    """
    Bisect every connected component for ``depth`` rounds.

    Sections with fewer than ``min_size`` nodes are never split; disconnected
    halves are emitted as separate sections. With ``max_size`` set, rounds
    continue past ``depth`` until no section exceeds it.
    """
    if depth < 0:
        raise DataError(f"Partition depth must be ≥ 0, got {depth}")
    sections = connected_components(graph)
    rounds = 0
    while rounds < depth or (max_size is not None and any(len(s) > max_size for s in sections)):
        split = []
        for section in sections:
            big_enough = len(section) >= max(min_size, 2)
            wanted = rounds < depth or (max_size is not None and len(section) > max_size)
            split.extend(_split(graph, section) if big_enough and wanted else [section])
        rounds += 1
        if len(split) == len(sections):
            break
        sections = split
    sections = sorted(sections, key=lambda s: s[0])
    assignment = np.empty(graph.n, dtype=int)
    for sid, section in enumerate(sections):
        assignment[section] = sid
    logger.info(f"Partitioned {graph.n} nodes into {len(sections)} sections after {rounds} rounds")
    return PartitionResult(assignment=assignment, sections=[tuple(s) for s in sections],
                           section_adjacency=section_adjacency(graph, assignment))


def random_connected_graph(n: int, extra_edges: int, rng: np.random.Generator) -> ConnectivityGraph:
    """Random recursive spanning tree on n nodes plus up to ``extra_edges`` distinct extra edges."""
    if n < 1:
        raise DataError(f"Graph needs at least one node, got {n}")
    edges = {(int(rng.integers(0, i)), i) for i in range(1, n)}
    capacity = n * (n - 1) // 2
    target = min(len(edges) + extra_edges, capacity)
    while len(edges) < target:
        a, b = sorted(int(v) for v in rng.choice(n, size=2, replace=False))
        edges.add((a, b))
    return ConnectivityGraph(n, tuple(sorted(edges)))
