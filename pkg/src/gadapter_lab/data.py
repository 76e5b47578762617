"""Synthetic structure-sensitive datasets and the dataset wrapper.

Node features are iid noise, independent of the label by construction, so
the label is recoverable only from the graph structure:

  triangle_clf  label 1 iff the graph contains a 3-cycle
  diameter_clf  label 1 iff the diameter is <= a threshold
  meanpath_reg  label = mean pairwise shortest-path distance

All generated graphs are connected (spanning tree plus extras). Class
balance is forced to exactly 50/50 for the classification kinds by
quota-filling rejection sampling: graphs are drawn from one density
distribution, labeled, and kept only while their class quota is open.

On-disk format is JSON lines: {id, num_nodes, edges, node_features,
label, task}. Labels are recomputable from the stored graph alone.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .graphs import Graph, StructureMatrix, add_virtual_node, all_pairs_shortest_paths, build_structure
from .model import Batch, ModelConfig, collate

DATA_KINDS = ("triangle_clf", "diameter_clf", "meanpath_reg")
DEFAULT_DIAMETER_THRESHOLD = 3


def _random_connected_edges(rng: np.random.Generator, n: int, extra_prob: float):
    """Spanning tree (each node attaches to a random earlier node) plus
    extra random edges, each candidate pair kept with extra_prob."""
    edges: set[tuple[int, int]] = set()
    nbr: list[set[int]] = [set() for _ in range(n)]

    def connect(u, v):
        edges.add((min(u, v), max(u, v)))
        nbr[u].add(v)
        nbr[v].add(u)

    for v in range(1, n):
        connect(int(rng.integers(0, v)), v)
    for u in range(n):
        for v in range(u + 1, n):
            if (u, v) in edges or rng.random() >= extra_prob:
                continue
            connect(u, v)
    return edges, nbr


def triangle_count(g: Graph) -> int:
    a = g.adjacency()
    return int(round(np.trace(a @ a @ a) / 6.0))


def graph_diameter(g: Graph) -> float:
    d = all_pairs_shortest_paths(g, unreachable=math.inf)
    return float(d.max())


def mean_path_length(g: Graph) -> float:
    d = all_pairs_shortest_paths(g, unreachable=math.inf)
    n = g.num_nodes
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, k=1)
    return float(d[iu].mean())


def label_for(kind: str, g: Graph, diameter_threshold: int = DEFAULT_DIAMETER_THRESHOLD) -> float:
    """Recompute a task label from the stored graph alone."""
    if kind == "triangle_clf":
        return 1.0 if triangle_count(g) > 0 else 0.0
    if kind == "diameter_clf":
        return 1.0 if graph_diameter(g) <= diameter_threshold else 0.0
    if kind == "meanpath_reg":
        return mean_path_length(g)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def gen_data(
    kind: str,
    count: int,
    n_range: tuple[int, int] = (6, 16),
    seed: int = 0,
    vocab: int = 16,
    diameter_threshold: int = DEFAULT_DIAMETER_THRESHOLD,
) -> list[Graph]:
    """Generate `count` connected graphs for one task, ~balanced classes."""
    if kind not in DATA_KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {DATA_KINDS}")
    lo, hi = n_range
    if lo < 4 or hi > 24 or lo > hi:
        raise ConfigError(f"n_range {n_range} outside [4, 24]")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(0xDA7A,))))
    graphs: list[Graph] = []
    task = "reg" if kind == "meanpath_reg" else "clf"

    def finish(i: int, n: int, edges, label: float) -> Graph:
        feats = tuple(int(f) for f in rng.integers(0, vocab, size=n))
        return Graph(
            id=f"{kind}-{i:05d}", num_nodes=n, edges=tuple(sorted(edges)),
            node_features=feats, label=label, task=task,
        )

    if kind == "meanpath_reg":
        for i in range(count):
            n = int(rng.integers(lo, hi + 1))
            edges, _ = _random_connected_edges(rng, n, float(rng.uniform(0.05, 0.35)))
            g = finish(i, n, edges, 0.0)
            graphs.append(dataclasses.replace(g, label=mean_path_length(g)))
        return graphs

    # classification kinds: quota-filling rejection sampling over one
    # density distribution, so each class keeps its natural structure
    want_pos = count // 2
    quotas = {1.0: count - want_pos, 0.0: want_pos}
    prob_range = (0.05, 0.3) if kind == "triangle_clf" else (0.02, 0.5)
    attempts = 0
    i = 0
    while (quotas[0.0] > 0 or quotas[1.0] > 0) and attempts < 400 * count:
        attempts += 1
        n = int(rng.integers(lo, hi + 1))
        edges, _ = _random_connected_edges(rng, n, float(rng.uniform(*prob_range)))
        probe = Graph(id="probe", num_nodes=n, edges=tuple(sorted(edges)), node_features=tuple([0] * n), label=0.0, task=task)
        label = label_for(kind, probe, diameter_threshold)
        if quotas[label] <= 0:
            continue
        quotas[label] -= 1
        graphs.append(finish(i, n, edges, label))
        i += 1
    if quotas[0.0] > 0 or quotas[1.0] > 0:
        raise DataError(f"could not balance {kind} after {attempts} attempts; widen n_range or threshold")
    return graphs


def split(
    graphs: list[Graph], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[list[Graph], list[Graph], list[Graph]]:
    """Deterministic shuffle into train/val/test, stratified for clf."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios {ratios} must sum to 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(0x5917,))))
    strata: dict[float, list[Graph]] = {}
    if graphs and graphs[0].task == "clf":
        for g in graphs:
            strata.setdefault(g.label, []).append(g)
    else:
        strata[0.0] = list(graphs)
    parts: tuple[list[Graph], ...] = ([], [], [])
    for _, members in sorted(strata.items()):
        order = rng.permutation(len(members))
        n_train = int(round(ratios[0] * len(members)))
        n_val = int(round(ratios[1] * len(members)))
        cuts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
        for part, cut in zip(parts, cuts):
            part.extend(members[i] for i in cut)
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) < 1:
            raise DataError(f"{name} split is empty; not enough samples for ratios {ratios}")
    return parts


def write_jsonl(graphs: list[Graph], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for g in graphs:
            if g.has_virtual:
                raise DataError(f"graph {g.id}: refusing to serialize augmented graphs")
            rec = {
                "id": g.id,
                "num_nodes": g.num_nodes,
                "edges": [list(e) for e in g.edges],
                "node_features": list(g.node_features),
                "label": g.label,
                "task": g.task,
            }
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> list[Graph]:
    graphs = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e})") from e
            if rec["id"] in seen:
                raise DataError(f"{path}:{lineno}: duplicate graph id {rec['id']!r}")
            seen.add(rec["id"])
            graphs.append(
                Graph(
                    id=rec["id"],
                    num_nodes=int(rec["num_nodes"]),
                    edges=tuple((int(u), int(v)) for u, v in rec["edges"]),
                    node_features=tuple(int(f) for f in rec["node_features"]),
                    label=float(rec["label"]),
                    task=rec["task"],
                )
            )
    return graphs


class GraphDataset:
    """Virtual-node-augmented graphs plus cached structure matrices.

    s_bias_kind feeds the backbone's attention bias; s_peft_kind feeds the
    structure-aware PEFT blocks. Either may be None to skip the cost.
    """

    def __init__(
        self,
        raw_graphs: list[Graph],
        config: ModelConfig,
        s_bias_kind: str | None = "S1",
        s_peft_kind: str | None = None,
        alpha: float = 0.5,
        beta: float = 0.5,
        unreachable: float = 0.0,
    ):
        if not raw_graphs:
            raise DataError("empty dataset")
        self.config = config
        self.task = raw_graphs[0].task
        self.graphs = [add_virtual_node(g, config.virtual_feature_id) for g in raw_graphs]
        self.labels = np.array([g.label for g in raw_graphs], dtype=np.float64)

        def build_all(kind):
            return [build_structure(g, kind, alpha=alpha, beta=beta, unreachable=unreachable) for g in self.graphs]

        self.s_bias: list[StructureMatrix] | None = build_all(s_bias_kind) if s_bias_kind else None
        self.s_peft: list[StructureMatrix] | None = build_all(s_peft_kind) if s_peft_kind else None

    def __len__(self) -> int:
        return len(self.graphs)

    def collate(self, idx: list[int]) -> Batch:
        return collate(
            [self.graphs[i] for i in idx],
            self.config,
            s_bias=[self.s_bias[i] for i in idx] if self.s_bias else None,
            s_peft=[self.s_peft[i] for i in idx] if self.s_peft else None,
        )
