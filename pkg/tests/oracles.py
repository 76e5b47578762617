"""Independent reference implementations used to cross-check the package.

Everything here is written the slow, obvious way on purpose: different
algorithms and different code paths from the library, so agreement is
evidence rather than tautology.
"""

import numpy as np


def floyd_warshall(adj: np.ndarray, unreachable: float = 0.0) -> np.ndarray:
    """Triple-loop shortest paths on an unweighted adjacency matrix."""
    n = adj.shape[0]
    d = np.where(adj > 0, 1.0, np.inf)
    np.fill_diagonal(d, 0.0)
    for k in range(n):
        for i in range(n):
            for j in range(n):
                if d[i, k] + d[k, j] < d[i, j]:
                    d[i, j] = d[i, k] + d[k, j]
    d[np.isinf(d)] = unreachable
    return d


def s2_dense(adj: np.ndarray) -> np.ndarray:
    """Degree-normalized self-looped adjacency via explicit diagonal matrices."""
    n = adj.shape[0]
    a_tilde = adj + np.eye(n)
    d_inv_sqrt = np.diag([1.0 / np.sqrt(a_tilde[i].sum()) for i in range(n)])
    return d_inv_sqrt @ a_tilde @ d_inv_sqrt


def auc_pairwise(scores, labels) -> float:
    """AUC by brute force over every positive-negative pair, ties count 1/2.

    The numerator is accumulated in half-units (an integer), so the final
    division is exact arithmetic on a dyadic rational; a correct rank-based
    implementation must match bit-for-bit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC undefined for single-class labels")
    half_units = 0
    for p in pos:
        for q in neg:
            if p > q:
                half_units += 2
            elif p == q:
                half_units += 1
    return half_units / (2.0 * len(pos) * len(neg))


def ap_bruteforce(scores, labels) -> float:
    """Average precision from a PR curve built threshold-by-threshold.

    For each distinct score (descending) take precision/recall of the
    "predict positive iff score >= threshold" rule, counted over the whole
    array each time, then sum precision * recall increments.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("AP undefined for single-class labels")
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        mask = scores >= thr
        tp = int(((labels == 1) & mask).sum())
        precision = tp / int(mask.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def kron_direct(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product by index arithmetic, no library call."""
    (n, m), (p, q) = a.shape, b.shape
    out = np.zeros((n * p, m * q))
    for i in range(n):
        for j in range(m):
            for k in range(p):
                for l in range(q):
                    out[i * p + k, j * q + l] = a[i, j] * b[k, l]
    return out


def random_graph_edges(rng: np.random.Generator, n: int, p: float):
    """Bernoulli edge set over all unordered pairs (may be disconnected)."""
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < p:
                edges.append((u, v))
    return tuple(edges)
