"""Graphs, virtual-node augmentation, and the four structure matrices.

A structure matrix is a constant m x m inductive-bias matrix fed to the
graph-convolution blocks and (optionally) to attention as a bias:

  S1  self-looped adjacency A + I
  S2  symmetric degree normalization D^{-1/2} (A+I) D^{-1/2}
  S3  all-pairs shortest-path distances (raw hop counts)
  S4  alpha * S2 + beta * S3

All kinds are exactly symmetric for undirected input and never receive
gradients. The virtual node, once added, is an ordinary node of the
augmented graph: connected to every other node, present in S.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

STRUCTURE_KINDS = ("S1", "S2", "S3", "S4")


@dataclass(frozen=True)
class Graph:
    """Undirected graph with categorical node features and a task label.

    Edges are canonicalized to sorted unique (min, max) pairs; self-loops
    are rejected (S1 adds the self-connection, the data never stores it).
    """

    id: str
    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    node_features: tuple[int, ...]
    label: float
    task: str
    has_virtual: bool = False

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError(f"graph {self.id}: num_nodes must be positive")
        if len(self.node_features) != self.num_nodes:
            raise ValueError(f"graph {self.id}: {len(self.node_features)} features for {self.num_nodes} nodes")
        canon = set()
        for u, v in self.edges:
            if u == v:
                raise ValueError(f"graph {self.id}: self-loop at node {u}")
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise ValueError(f"graph {self.id}: edge ({u},{v}) outside [0,{self.num_nodes})")
            canon.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", tuple(sorted(canon)))
        object.__setattr__(self, "node_features", tuple(int(f) for f in self.node_features))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        for u, v in self.edges:
            a[u, v] = 1.0
            a[v, u] = 1.0
        return a

    def neighbor_lists(self) -> list[list[int]]:
        nbr: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            nbr[u].append(v)
            nbr[v].append(u)
        return nbr

    def degree(self, node: int) -> int:
        return sum(1 for u, v in self.edges if node in (u, v))


@dataclass(frozen=True)
class StructureMatrix:
    """One structure kind materialized for one (augmented) graph."""

    kind: str
    matrix: Tensor
    alpha: float | None = None
    beta: float | None = None

    @property
    def m(self) -> int:
        return self.matrix.shape[0]


def add_virtual_node(g: Graph, virtual_feature_id: int) -> Graph:
    """Prepend a virtual node at index 0, connected to every original node.

    Original indices shift by +1; the virtual node carries the reserved
    feature id so the embedding table can give it its own row.
    """
    if g.has_virtual:
        raise ValueError(f"graph {g.id} already has a virtual node")
    shifted = tuple((u + 1, v + 1) for u, v in g.edges)
    spokes = tuple((0, i + 1) for i in range(g.num_nodes))
    return Graph(
        id=g.id,
        num_nodes=g.num_nodes + 1,
        edges=spokes + shifted,
        node_features=(virtual_feature_id,) + g.node_features,
        label=g.label,
        task=g.task,
        has_virtual=True,
    )


def all_pairs_shortest_paths(g: Graph, unreachable: float = 0.0) -> np.ndarray:
    """Hop-count distances via BFS from every node.

    Unreachable pairs get the sentinel (default 0.0: no message passes
    between disconnected components). Result is exactly symmetric.
    """
    n = g.num_nodes
    nbr = g.neighbor_lists()
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in nbr[u]:
                if dist[src, v] < 0:
                    dist[src, v] = dist[src, u] + 1
                    queue.append(v)
    out = dist.astype(np.float64)
    out[dist < 0] = float(unreachable)
    return out


def build_structure(
    g: Graph,
    kind: str,
    alpha: float | None = None,
    beta: float | None = None,
    unreachable: float = 0.0,
) -> StructureMatrix:
    """Materialize one structure kind for a graph; the matrix is a constant."""
    if kind not in STRUCTURE_KINDS:
        raise ConfigError(f"unknown structure kind {kind!r}; expected one of {STRUCTURE_KINDS}")
    if kind == "S4" and (alpha is None or beta is None):
        raise ConfigError("structure kind S4 requires alpha and beta")
    a_tilde = g.adjacency() + np.eye(g.num_nodes)
    if kind == "S1":
        mat = a_tilde
    elif kind == "S2":
        mat = _sym_normalize(a_tilde)
    elif kind == "S3":
        mat = all_pairs_shortest_paths(g, unreachable=unreachable)
    else:
        mat = alpha * _sym_normalize(a_tilde) + beta * all_pairs_shortest_paths(g, unreachable=unreachable)
    return StructureMatrix(kind=kind, matrix=Tensor(mat), alpha=alpha, beta=beta)


def _sym_normalize(a_tilde: np.ndarray) -> np.ndarray:
    # D^{-1/2} A~ D^{-1/2}; self-loops make every degree >= 1
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]


def pad_batch(structures: list[StructureMatrix], m_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad structures to a common size.

    Returns (batched [B, m_max, m_max], mask [B, m_max]) where mask is 1.0
    on real nodes. Downstream ops must be padding-invariant: a graph
    batched alone and a graph padded must produce identical outputs.
    """
    batched = np.zeros((len(structures), m_max, m_max))
    mask = np.zeros((len(structures), m_max))
    for i, s in enumerate(structures):
        m = s.m
        if m > m_max:
            raise ValueError(f"structure of size {m} does not fit m_max={m_max}")
        batched[i, :m, :m] = s.matrix.data
        mask[i, :m] = 1.0
    return batched, mask
