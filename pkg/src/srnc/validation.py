"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numpy as np

from .exceptions import GraphFormatError
from .graphstore import Graph, ShiftScenario


def check_graph(g) -> Graph:
    if not isinstance(g, Graph):
        raise TypeError(f"expected a Graph, got {type(g).__name__}")
    n = g.num_nodes
    if g.features.shape[0] != n:
        raise GraphFormatError(f"features have {g.features.shape[0]} rows for {n} nodes")
    if g.labels.shape != (n,):
        raise GraphFormatError(f"labels have shape {g.labels.shape} for {n} nodes")
    if not np.all(np.isfinite(g.features)):
        raise GraphFormatError("features contain non-finite values")
    return g


def check_scenario(s) -> ShiftScenario:
    if not isinstance(s, ShiftScenario):
        raise TypeError(f"expected a ShiftScenario, got {type(s).__name__}")
    check_graph(s.source_graph)
    if s.target_graph is not s.source_graph:
        check_graph(s.target_graph)
    if len(s.train_nodes) == 0:
        raise ValueError("scenario has no training nodes")
    for name, nodes, labels, graph in (
            ("train", s.train_nodes, s.train_labels, s.source_graph),
            ("val", s.val_nodes, s.val_labels, s.source_graph),
            ("test", s.test_nodes, s.test_labels, s.target_graph)):
        if len(nodes) != len(labels):
            raise ValueError(f"{name}: {len(nodes)} nodes but {len(labels)} labels")
        if len(nodes) and (nodes.min() < 0 or nodes.max() >= graph.num_nodes):
            raise ValueError(f"{name}: node id out of range")
    if len(np.intersect1d(s.train_nodes, s.val_nodes)):
        raise ValueError("train and validation nodes overlap")
    if s.source_graph is s.target_graph and len(np.intersect1d(s.train_nodes, s.test_nodes)):
        raise ValueError("train and test nodes overlap")
    if len(s.train_labels) and s.train_labels.max() >= s.num_known:
        raise ValueError("training labels must be known classes")
    return s


def check_probability_rows(p, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected a 2-D probability matrix")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise ValueError("rows are not probability distributions")
    return p


def check_node_ids(nodes, num_nodes: int) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64).ravel()
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= num_nodes):
        raise ValueError(f"node ids must lie in [0, {num_nodes})")
    return nodes
