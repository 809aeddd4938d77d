"""Classification and clustering metrics."""
from __future__ import annotations

import numpy as np

from .alignment import solve_class_to_cluster


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred, truth


def micro_f1(pred, truth) -> float:
    """Fraction of exact matches (equals accuracy for single-label data)."""
    pred, truth = _pair(pred, truth)
    return float(np.mean(pred == truth))


def macro_f1_paper(pred, truth, num_classes: int, skip_empty: bool = False) -> float:
    """Mean per-class recall over ``num_classes`` classes.

    Classes absent from ``truth`` contribute 0 unless ``skip_empty`` drops them.
    """
    pred, truth = _pair(pred, truth)
    counts = np.bincount(truth, minlength=num_classes)[:num_classes]
    hits = np.bincount(truth[pred == truth], minlength=num_classes)[:num_classes]
    present = counts > 0
    recall = np.where(present, hits / np.maximum(counts, 1), 0.0)
    if skip_empty:
        return float(recall[present].mean()) if present.any() else 0.0
    return float(recall.mean())


def macro_f1_standard(pred, truth, num_classes: int) -> float:
    """Unweighted mean of per-class F1 over classes seen in truth or prediction."""
    pred, truth = _pair(pred, truth)
    scores = []
    for c in range(num_classes):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def per_class_recall(pred, truth, num_classes: int) -> np.ndarray:
    pred, truth = _pair(pred, truth)
    counts = np.bincount(truth, minlength=num_classes)[:num_classes]
    hits = np.bincount(truth[pred == truth], minlength=num_classes)[:num_classes]
    return np.where(counts > 0, hits / np.maximum(counts, 1), 0.0)


def contingency(assign, truth) -> np.ndarray:
    assign, truth = _pair(assign, truth)
    _, a = np.unique(assign, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((a.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(table, (a, t), 1)
    return table


def clustering_acc(assign, truth) -> float:
    """Best accuracy over injective cluster -> class matchings (Hungarian)."""
    table = contingency(assign, truth)
    k, n = table.shape
    # classes as rows; pad cluster columns when there are more classes than clusters
    cost = -table.T.astype(np.float64)
    if n > k:
        cost = np.hstack([cost, np.zeros((n, n - k))])
    cols = solve_class_to_cluster(cost)
    matched = -cost[np.arange(n), cols].sum()
    return float(matched / table.sum())


def nmi(assign, truth) -> float:
    """I(A;T) / sqrt(H(A) H(T)) with natural logs.

    Two single-block partitions count as identical (1.0); otherwise a zero
    entropy on either side gives 0.
    """
    table = contingency(assign, truth).astype(np.float64)
    total = table.sum()
    pa = table.sum(axis=1) / total
    pt = table.sum(axis=0) / total
    ha = -np.sum(pa * np.log(pa))
    ht = -np.sum(pt * np.log(pt))
    if ha == 0 and ht == 0:
        return 1.0
    if ha == 0 or ht == 0:
        return 0.0
    joint = table / total
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, pt)[nz]))
    return float(np.clip(mi / np.sqrt(ha * ht), 0.0, 1.0))


def label_histogram(labels, num_classes: int) -> np.ndarray:
    """Normalized label frequencies (ignores -1)."""
    labels = np.asarray(labels, dtype=np.int64)
    labels = labels[labels >= 0]
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return counts / max(counts.sum(), 1.0)
