"""Cluster-to-class alignment: KL cost matrix and rectangular linear sum assignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

ALIGN_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class ClusterClassMapping:
    """Injective matching of N classes onto K >= N clusters.

    ``inverse[n]`` is the cluster assigned to class ``n``; ``assign`` maps
    cluster ids back to classes and omits the K - N unmapped clusters.
    """

    inverse: np.ndarray
    num_clusters: int

    @property
    def num_classes(self) -> int:
        return len(self.inverse)

    @property
    def assign(self) -> dict:
        return {int(k): n for n, k in enumerate(self.inverse)}

    @property
    def unmapped_clusters(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.num_clusters), self.inverse)

    def cluster_to_class(self, unmapped_value: int = -1) -> np.ndarray:
        table = np.full(self.num_clusters, unmapped_value, dtype=np.int64)
        table[self.inverse] = np.arange(self.num_classes)
        return table

    def to_json(self) -> dict:
        return {str(k): int(n) for k, n in sorted(self.assign.items())}

    def __eq__(self, other):
        return (isinstance(other, ClusterClassMapping)
                and self.num_clusters == other.num_clusters
                and np.array_equal(self.inverse, other.inverse))


def _column_distributions(probs: np.ndarray, eps: float, what: str) -> np.ndarray:
    if (probs.sum(axis=0) <= 0).any():
        raise ValueError(f"{what}: all-zero column")
    smoothed = probs + eps
    return smoothed / smoothed.sum(axis=0, keepdims=True)


def kl_cost_matrix(class_probs, cluster_probs, nodes=None, eps: float = ALIGN_EPS) -> np.ndarray:
    """K x N matrix of KL(class column || cluster column) over the node set.

    Each column is normalized into a distribution over the nodes before the
    divergence is taken. ``nodes`` selects rows of both inputs when given.
    """
    p = np.asarray(class_probs, dtype=np.float64)
    q = np.asarray(cluster_probs, dtype=np.float64)
    if nodes is not None:
        nodes = np.asarray(nodes, dtype=np.int64)
        p, q = p[nodes], q[nodes]
    if p.shape[0] == 0:
        raise ValueError("kl_cost_matrix: empty node set")
    if p.shape[0] != q.shape[0]:
        raise ValueError(f"kl_cost_matrix: {p.shape[0]} class rows vs {q.shape[0]} cluster rows")
    p = _column_distributions(p, eps, "class_probs")
    q = _column_distributions(q, eps, "cluster_probs")
    # 0 log 0 = 0; a zero in q against positive p mass is an infinite cost
    neg_entropy = xlogy(p, p).sum(axis=0)
    log_q = np.log(np.where(q > 0, q, 1.0))
    cross = log_q.T @ p
    cross[((q == 0).astype(float).T @ (p > 0)) > 0] = -np.inf
    return np.maximum(neg_entropy[None, :] - cross, 0.0)


def _hungarian(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian method for n x m, n <= m.

    Returns the row -> column assignment and the dual potentials (u, v);
    columns left unassigned keep v == 0.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows_to_cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            rows_to_cols[p[j] - 1] = j - 1
    return rows_to_cols, u[1:], v[1:]


def _solve_with_fixed(cost, fixed: dict):
    n, m = cost.shape
    rows = [r for r in range(n) if r not in fixed]
    cols = [c for c in range(m) if c not in set(fixed.values())]
    out = np.full(n, -1, dtype=np.int64)
    for r, c in fixed.items():
        out[r] = c
    if rows:
        sub, _, _ = _hungarian(cost[np.ix_(rows, cols)])
        for r, c in zip(rows, sub):
            out[r] = cols[c]
    return out, float(cost[np.arange(n), out].sum())


def solve_class_to_cluster(cost_nk: np.ndarray) -> np.ndarray:
    """Optimal injective class -> cluster choice for an N x K cost (N <= K).

    Among all minimizers the lexicographically smallest tuple
    ``(cluster of class 0, cluster of class 1, ...)`` is returned.
    """
    n, m = cost_nk.shape
    assign, u, v = _hungarian(cost_nk)
    best = float(cost_nk[np.arange(n), assign].sum())
    tol = 1e-10 * (1.0 + abs(best))
    reduced = cost_nk - u[:, None] - v[None, :]
    fixed: dict = {}
    for r in range(n):
        taken = set(fixed.values())
        for k in range(assign[r]):
            # only zero-reduced-cost edges can appear in an optimal matching
            if k in taken or reduced[r, k] > 1e-9 * (1.0 + abs(cost_nk[r, k])):
                continue
            trial, total = _solve_with_fixed(cost_nk, {**fixed, r: k})
            if total <= best + tol:
                assign = trial
                break
        fixed[r] = int(assign[r])
    return assign


def linear_sum_assignment(cost) -> ClusterClassMapping:
    """Minimum-cost injective mapping for a K x N cost (clusters x classes, K >= N)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    k, n = cost.shape
    if k < n:
        raise ValueError(f"need at least as many clusters as classes (K={k} < N={n})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if n == 0:
        return ClusterClassMapping(np.empty(0, dtype=np.int64), k)
    return ClusterClassMapping(solve_class_to_cluster(cost.T), k)


def mapping_cost(cost, mapping: ClusterClassMapping) -> float:
    cost = np.asarray(cost)
    return float(cost[mapping.inverse, np.arange(mapping.num_classes)].sum())


def map_pseudo_labels(mapping: ClusterClassMapping, cluster_ids, open_set: bool) -> np.ndarray:
    """Translate cluster ids into class labels.

    Unmapped clusters become the unknown class (id N) in open-set mode and
    -1 (dropped) otherwise.
    """
    ids = np.asarray(cluster_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= mapping.num_clusters):
        raise ValueError("cluster id out of range")
    unmapped = mapping.num_classes if open_set else -1
    return mapping.cluster_to_class(unmapped)[ids]


def route_to_clusters(class_dist, mapping: ClusterClassMapping,
                      spread_unknown: bool = True) -> np.ndarray:
    """Carry per-node class distributions onto cluster columns.

    Known-class mass lands on the class's mapped cluster. An extra unknown
    column (width N + 1) is spread evenly over the unmapped clusters when
    ``spread_unknown`` is set and discarded otherwise.
    """
    dist = np.asarray(class_dist, dtype=np.float64)
    n_cls = mapping.num_classes
    out = np.zeros((dist.shape[0], mapping.num_clusters))
    out[:, mapping.inverse] = dist[:, :n_cls]
    unmapped = mapping.unmapped_clusters
    if dist.shape[1] > n_cls and spread_unknown and len(unmapped):
        out[:, unmapped] += dist[:, [n_cls]] / len(unmapped)
    return out
