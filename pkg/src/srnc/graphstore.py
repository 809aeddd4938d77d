"""Graph data model, on-disk formats, adjacency normalization and shift scenarios.

On-disk layout of a dataset directory::

    edges.tsv     "u<TAB>v" per line, 0-based ids, '#' comments allowed
    labels.tsv    "node<TAB>label", -1 for unlabeled; one line per node
    features.csv  one row per node, comma separated  (or features.bin)
    times.tsv     optional, "node<TAB>integer-time"
    meta.json     {"num_classes": N, "name": "..."}

``features.bin`` is the magic ``SRNCFEAT`` followed by two little-endian
u64 (rows, cols) and rows*cols little-endian float32 values, row-major.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import GraphFormatError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"SRNCFEAT"


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected, unweighted graph with node features and labels.

    ``adjacency`` is a symmetric CSR matrix of ones without self-loops.
    Labels are integers in ``[0, num_classes)`` or -1 for unlabeled nodes.
    """

    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "graph"
    node_times: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @cached_property
    def num_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr).astype(np.int64)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (|E|, 2) array with u < v, sorted."""
        upper = sp.triu(self.adjacency, k=1).tocoo()
        edges = np.stack([upper.row, upper.col], axis=1).astype(np.int64)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        return edges[order]

    @classmethod
    def from_edges(cls, num_nodes, edges, features, labels, num_classes,
                   name="graph", node_times=None, meta=None) -> "Graph":
        """Build a graph from a raw edge array, symmetrizing and deduplicating.

        Self-loops are dropped; their count lands in ``meta["self_loops_dropped"]``.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        features = np.ascontiguousarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        meta = dict(meta or {})
        if features.ndim != 2 or features.shape[0] != num_nodes:
            raise GraphFormatError(
                f"feature rows ({features.shape[0] if features.ndim else 0}) "
                f"!= num_nodes ({num_nodes})")
        if labels.shape != (num_nodes,):
            raise GraphFormatError(f"labels length {labels.shape} != ({num_nodes},)")
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise GraphFormatError(f"edge endpoint out of range [0, {num_nodes})")
        if labels.size and (labels.min() < -1 or labels.max() >= num_classes):
            raise GraphFormatError(
                f"labels must lie in [-1, {num_classes}), got "
                f"[{labels.min()}, {labels.max()}]")
        loops = edges[:, 0] == edges[:, 1]
        meta.setdefault("raw_edge_lines", int(len(edges)))
        meta["self_loops_dropped"] = int(loops.sum())
        edges = edges[~loops]
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes))
        # duplicates were summed by the constructor; clamp back to 0/1
        adj.data[:] = 1.0
        adj.sort_indices()
        meta["duplicate_edges_dropped"] = int(len(edges) - adj.nnz // 2)
        if node_times is not None:
            node_times = np.asarray(node_times, dtype=np.int64)
            if node_times.shape != (num_nodes,):
                raise GraphFormatError("node_times length != num_nodes")
        return cls(adj, features, labels, int(num_classes), name, node_times, meta)


@dataclass(frozen=True, eq=False)
class NormalizedOperator:
    """Symmetric GCN propagation matrix D~^-1/2 (A + I) D~^-1/2."""

    matrix: sp.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_adjacency(g: Graph) -> NormalizedOperator:
    n = g.num_nodes
    a_tilde = (g.adjacency + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    scale = sp.diags(inv_sqrt)
    op = (scale @ a_tilde @ scale).tocsr()
    op.sort_indices()
    return NormalizedOperator(op)


# --------------------------------------------------------------------------
# file formats


def _read_tsv_pairs(path: Path, what: str) -> np.ndarray:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path.name}:{lineno}: expected 2 fields, got {len(parts)}")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise GraphFormatError(
                    f"{path.name}:{lineno}: non-numeric token in {what} line {line!r}") from None
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def read_feature_bin(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != FEATURE_MAGIC:
            raise GraphFormatError(f"{path.name}: bad magic {magic!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise GraphFormatError(f"{path.name}: truncated header")
        rows, cols = struct.unpack("<QQ", header)
        payload = fh.read()
    if len(payload) != rows * cols * 4:
        raise GraphFormatError(
            f"{path.name}: expected {rows * cols * 4} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


def write_feature_bin(path, matrix) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", *matrix.shape))
        fh.write(matrix.tobytes(order="C"))


def _read_feature_csv(path: Path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2, comments="#")
    except ValueError as exc:
        raise GraphFormatError(f"{path.name}: non-numeric token ({exc})") from None
    return data


def load_graph(dir_path) -> Graph:
    """Load a dataset directory into a :class:`Graph`.

    Duplicate and reversed edge lines collapse to one undirected edge;
    self-loop lines are dropped with a logged warning.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise GraphFormatError(f"not a directory: {root}")
    for required in ("edges.tsv", "labels.tsv"):
        if not (root / required).is_file():
            raise GraphFormatError(f"missing file: {required}")
    meta_path = root / "meta.json"
    meta = {}
    if meta_path.is_file():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"meta.json: {exc}") from None

    label_pairs = _read_tsv_pairs(root / "labels.tsv", "label")
    if len(label_pairs) == 0:
        raise GraphFormatError("labels.tsv: no nodes")
    num_nodes = int(label_pairs[:, 0].max()) + 1
    if label_pairs[:, 0].min() < 0:
        raise GraphFormatError("labels.tsv: node id out of range (negative)")
    labels = np.full(num_nodes, -2, dtype=np.int64)
    labels[label_pairs[:, 0]] = label_pairs[:, 1]
    if len(np.unique(label_pairs[:, 0])) != len(label_pairs) or (labels == -2).any():
        raise GraphFormatError("labels.tsv: every node 0..n-1 must appear exactly once")
    num_classes = int(meta.get("num_classes", labels.max() + 1))

    if (root / "features.bin").is_file():
        features = read_feature_bin(root / "features.bin").astype(np.float64)
        feature_format = "bin"
    elif (root / "features.csv").is_file():
        features = _read_feature_csv(root / "features.csv")
        feature_format = "csv"
    else:
        raise GraphFormatError("missing file: features.csv or features.bin")
    if features.shape[0] != num_nodes:
        raise GraphFormatError(
            f"feature row count {features.shape[0]} != num_nodes {num_nodes}")

    edges = _read_tsv_pairs(root / "edges.tsv", "edge")
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = edges[(edges < 0).any(axis=1) | (edges >= num_nodes).any(axis=1)][0]
        raise GraphFormatError(
            f"edges.tsv: node id out of range in edge {tuple(bad)} (num_nodes={num_nodes})")

    node_times = None
    if (root / "times.tsv").is_file():
        pairs = _read_tsv_pairs(root / "times.tsv", "time")
        if len(pairs) != num_nodes or set(pairs[:, 0].tolist()) != set(range(num_nodes)):
            raise GraphFormatError("times.tsv: must list every node exactly once")
        node_times = np.empty(num_nodes, dtype=np.int64)
        node_times[pairs[:, 0]] = pairs[:, 1]

    g = Graph.from_edges(num_nodes, edges, features, labels, num_classes,
                         name=str(meta.get("name", root.name)), node_times=node_times,
                         meta={"feature_format": feature_format})
    if g.meta["self_loops_dropped"]:
        logger.warning("%s: dropped %d self-loop lines", root, g.meta["self_loops_dropped"])
    logger.info("loaded %s: nodes=%d edges=%d (raw lines %d) classes=%d",
                g.name, g.num_nodes, g.num_edges, g.meta["raw_edge_lines"], g.num_classes)
    return g


def save_graph(g: Graph, dir_path, feature_format: str = "bin") -> None:
    """Write ``g`` in the directory format read by :func:`load_graph`.

    ``csv`` features are written with ``repr`` precision so float64 values
    round-trip exactly; ``bin`` stores float32.
    """
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "edges.tsv", "w") as fh:
        for u, v in g.edge_list():
            fh.write(f"{u}\t{v}\n")
    with open(root / "labels.tsv", "w") as fh:
        for i, y in enumerate(g.labels):
            fh.write(f"{i}\t{y}\n")
    if feature_format == "bin":
        write_feature_bin(root / "features.bin", g.features)
        (root / "features.csv").unlink(missing_ok=True)
    elif feature_format == "csv":
        with open(root / "features.csv", "w") as fh:
            for row in g.features:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
        (root / "features.bin").unlink(missing_ok=True)
    else:
        raise ValueError(f"unknown feature format {feature_format!r}")
    if g.node_times is not None:
        with open(root / "times.tsv", "w") as fh:
            for i, t in enumerate(g.node_times):
                fh.write(f"{i}\t{t}\n")
    (root / "meta.json").write_text(json.dumps({"num_classes": g.num_classes, "name": g.name}))


def induced_subgraph(g: Graph, nodes) -> Graph:
    """Subgraph on ``nodes`` (original ids, kept in ascending order)."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    if len(nodes) == g.num_nodes:
        return g
    adj = g.adjacency[nodes][:, nodes].tocsr()
    adj.sort_indices()
    times = None if g.node_times is None else g.node_times[nodes]
    meta = {"parent": g.name, "original_ids": nodes}
    return Graph(adj, g.features[nodes], g.labels[nodes], g.num_classes,
                 g.name, times, meta)


# --------------------------------------------------------------------------
# shift scenarios


@dataclass(frozen=True, eq=False)
class ShiftScenario:
    """Source/target graphs with disjoint train/val/test node sets.

    Node ids in ``train_nodes``/``val_nodes`` index the source graph and
    ``test_nodes`` index the target graph. The ``*_labels`` arrays are in
    the classifier's index space: known class ``known_classes[i]`` maps to
    ``i`` and every hidden class maps to ``unknown_class_id`` (== N).
    """

    kind: str
    source_graph: Graph
    target_graph: Graph
    train_nodes: np.ndarray
    val_nodes: np.ndarray
    test_nodes: np.ndarray
    train_labels: np.ndarray
    val_labels: np.ndarray
    test_labels: np.ndarray
    known_classes: tuple
    hidden_classes: tuple = ()
    source_to_target: Optional[np.ndarray] = None
    source_ids: Optional[np.ndarray] = None
    target_ids: Optional[np.ndarray] = None

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    @property
    def unknown_class_id(self) -> int:
        return len(self.known_classes)

    @property
    def open_set(self) -> bool:
        return self.kind == "open_set"

    @property
    def num_outputs(self) -> int:
        return self.num_known + 1 if self.open_set else self.num_known

    def to_index_labels(self, labels) -> np.ndarray:
        """Map original class labels into index space (-1 stays -1)."""
        return to_index_labels(labels, self.known_classes, self.hidden_classes)

    def target_exclusion(self) -> np.ndarray:
        """Target-graph ids of source train nodes (empty when graphs are disjoint)."""
        if self.source_to_target is None:
            return np.empty(0, dtype=np.int64)
        mapped = self.source_to_target[self.train_nodes]
        return mapped[mapped >= 0]


def mask_hidden_labels(labels, hidden_classes, unknown_value) -> np.ndarray:
    """Replace hidden-class labels by ``unknown_value`` in original label space."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    if len(hidden_classes):
        labels[np.isin(labels, list(hidden_classes))] = unknown_value
    return labels


def to_index_labels(labels, known_classes, hidden_classes=()) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full(labels.shape, -1, dtype=np.int64)
    for idx, c in enumerate(known_classes):
        out[labels == c] = idx
    if len(hidden_classes):
        out[np.isin(labels, list(hidden_classes))] = len(known_classes)
    return out


def make_openset_split(g: Graph, hidden_classes=(), per_class_train: int = 20,
                       val_fraction: float = 0.15, seed=0) -> ShiftScenario:
    """Planetoid-style split with some classes masked as unknown at test time."""
    hidden = tuple(sorted(set(int(c) for c in hidden_classes)))
    if any(c < 0 or c >= g.num_classes for c in hidden):
        raise ValueError(f"hidden classes {hidden} outside label space [0, {g.num_classes})")
    known = tuple(c for c in range(g.num_classes) if c not in hidden)
    if not known:
        raise ValueError("hidden classes cover the entire label space")
    if per_class_train < 1:
        raise ValueError("per_class_train must be >= 1")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    train = []
    for c in known:
        members = np.flatnonzero(g.labels == c)
        if len(members) < per_class_train:
            raise ValueError(
                f"class {c} has {len(members)} labeled nodes, need {per_class_train}")
        train.append(rng.choice(members, per_class_train, replace=False))
    train = np.sort(np.concatenate(train))
    rest = np.setdiff1d(np.flatnonzero(g.labels >= 0), train)
    rest = rng.permutation(rest)
    n_val = int(round(val_fraction * len(rest)))
    val, test = np.sort(rest[:n_val]), np.sort(rest[n_val:])
    index = to_index_labels(g.labels, known, hidden)
    return ShiftScenario(
        kind="open_set", source_graph=g, target_graph=g,
        train_nodes=train, val_nodes=val, test_nodes=test,
        train_labels=index[train], val_labels=index[val], test_labels=index[test],
        known_classes=known, hidden_classes=hidden,
        source_to_target=np.arange(g.num_nodes, dtype=np.int64))


def make_temporal_split(g: Graph, node_times=None, train_cutoff=0, val_cutoff=0,
                        test_window=(0, 0), allow_empty: bool = False) -> ShiftScenario:
    """Close-set split by node time.

    The source graph is induced on nodes with time <= ``val_cutoff`` and the
    target graph on nodes with time <= ``test_window[1]``; ids are remapped
    in ascending original order and the tables are kept on the scenario.
    """
    times = g.node_times if node_times is None else np.asarray(node_times, dtype=np.int64)
    if times is None or times.shape != (g.num_nodes,):
        raise ValueError("node_times must be defined for every node")
    lo, hi = test_window
    if not (train_cutoff <= val_cutoff <= hi and lo <= hi):
        raise ValueError(
            f"cutoffs must be non-decreasing: train={train_cutoff} val={val_cutoff} window=({lo},{hi}]")
    source_ids = np.flatnonzero(times <= val_cutoff)
    target_ids = np.flatnonzero(times <= hi)
    source = induced_subgraph(g, source_ids)
    target = induced_subgraph(g, target_ids)
    st, tt = times[source_ids], times[target_ids]
    s_lab, t_lab = g.labels[source_ids], g.labels[target_ids]
    train = np.flatnonzero((st <= train_cutoff) & (s_lab >= 0))
    val = np.flatnonzero((st > train_cutoff) & (st <= val_cutoff) & (s_lab >= 0))
    test = np.flatnonzero((tt > lo) & (tt <= hi) & (t_lab >= 0))
    if len(train) == 0:
        raise ValueError("empty train split")
    if not allow_empty and (len(val) == 0 or len(test) == 0):
        raise ValueError(f"empty split: |val|={len(val)} |test|={len(test)}")
    known = tuple(range(g.num_classes))
    return ShiftScenario(
        kind="close_set", source_graph=source, target_graph=target,
        train_nodes=train, val_nodes=val, test_nodes=test,
        train_labels=s_lab[train], val_labels=s_lab[val], test_labels=t_lab[test],
        known_classes=known, hidden_classes=(),
        source_to_target=np.searchsorted(target_ids, source_ids).astype(np.int64),
        source_ids=source_ids, target_ids=target_ids)


@dataclass(frozen=True)
class SbmShiftConfig:
    """Two-graph stochastic block model with label-prior drift.

    Source and target share the edge model and the per-block feature means;
    only the block (label) priors differ.
    """

    blocks: int = 2
    num_nodes_source: int = 500
    num_nodes_target: int = 500
    intra_p: float = 0.05
    inter_p: float = 0.01
    feature_dim: int = 16
    feature_noise: float = 1.0
    label_prior_source: Sequence[float] = (0.7, 0.3)
    label_prior_target: Sequence[float] = (0.3, 0.7)
    num_train: Optional[int] = None
    val_fraction: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.blocks < 1 or self.num_nodes_source < 1 or self.num_nodes_target < 1:
            raise ValueError("blocks and node counts must be positive")
        if not 0 <= self.inter_p < self.intra_p <= 1:
            raise ValueError("need 0 <= inter_p < intra_p <= 1 (homophily)")
        for prior in (self.label_prior_source, self.label_prior_target):
            p = np.asarray(prior, dtype=float)
            if p.shape != (self.blocks,) or (p < 0).any() or abs(p.sum() - 1) > 1e-9:
                raise ValueError(f"degenerate prior {tuple(prior)} for {self.blocks} blocks")


def sample_sbm_edges(labels, intra_p: float, inter_p: float, rng) -> np.ndarray:
    """Sample undirected SBM edges (u < v) for the given block labels."""
    labels = np.asarray(labels)
    n = len(labels)
    chunks = []
    step = max(1, 2_000_000 // max(n, 1))
    for start in range(0, n, step):
        rows = np.arange(start, min(n, start + step))
        draw = rng.random((len(rows), n))
        prob = np.where(labels[rows, None] == labels[None, :], intra_p, inter_p)
        hit = (draw < prob) & (np.arange(n)[None, :] > rows[:, None])
        r, c = np.nonzero(hit)
        chunks.append(np.stack([rows[r], c], axis=1))
    return np.concatenate(chunks) if chunks else np.empty((0, 2), dtype=np.int64)


def synth_sbm_graph(num_nodes: int, blocks: int, intra_p: float, inter_p: float,
                    feature_dim: int = 16, feature_noise: float = 1.0, prior=None,
                    seed=0, means=None, name="sbm") -> Graph:
    """One homophilous SBM graph with Gaussian block-mean features."""
    rng = np.random.default_rng(seed)
    prior = np.full(blocks, 1.0 / blocks) if prior is None else np.asarray(prior, float)
    if means is None:
        means = rng.normal(0.0, 1.0, (blocks, feature_dim))
    labels = rng.choice(blocks, size=num_nodes, p=prior)
    edges = sample_sbm_edges(labels, intra_p, inter_p, rng)
    feats = means[labels] + feature_noise * rng.normal(0.0, 1.0, (num_nodes, feature_dim))
    return Graph.from_edges(num_nodes, edges, feats, labels, blocks, name=name)


def synth_sbm_shift(cfg: SbmShiftConfig) -> ShiftScenario:
    """Close-set scenario: train/val on a source SBM, test on a drifted target SBM."""
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    means = np.random.default_rng(seeds[0]).normal(0.0, 1.0, (cfg.blocks, cfg.feature_dim))
    common = dict(blocks=cfg.blocks, intra_p=cfg.intra_p, inter_p=cfg.inter_p,
                  feature_dim=cfg.feature_dim, feature_noise=cfg.feature_noise, means=means)
    source = synth_sbm_graph(cfg.num_nodes_source, prior=cfg.label_prior_source,
                             seed=seeds[1], name="sbm-source", **common)
    target = synth_sbm_graph(cfg.num_nodes_target, prior=cfg.label_prior_target,
                             seed=seeds[2], name="sbm-target", **common)
    rng = np.random.default_rng(seeds[0].spawn(1)[0])
    num_train = cfg.num_train if cfg.num_train is not None else 20 * cfg.blocks
    if not 0 < num_train <= source.num_nodes:
        raise ValueError(f"num_train={num_train} outside (0, {source.num_nodes}]")
    perm = rng.permutation(source.num_nodes)
    train = np.sort(perm[:num_train])
    rest = perm[num_train:]
    n_val = int(round(cfg.val_fraction * len(rest)))
    val = np.sort(rest[:n_val])
    test = np.arange(target.num_nodes, dtype=np.int64)
    return ShiftScenario(
        kind="close_set", source_graph=source, target_graph=target,
        train_nodes=train, val_nodes=val, test_nodes=test,
        train_labels=source.labels[train], val_labels=source.labels[val],
        test_labels=target.labels[test], known_classes=tuple(range(cfg.blocks)),
        hidden_classes=(), source_to_target=None)
