import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph
from oracles import dense_gcn_operator, random_graph
from srnc.clustering import modularity
from srnc.exceptions import GraphFormatError
from srnc.graphstore import (Graph, SbmShiftConfig, load_graph, make_openset_split,
                             make_temporal_split, mask_hidden_labels, normalize_adjacency,
                             read_feature_bin, save_graph, synth_sbm_graph, synth_sbm_shift,
                             write_feature_bin)


def write_dataset(root, edges_text, labels_text, features_text=None, meta=None):
    root.mkdir(parents=True, exist_ok=True)
    (root / "edges.tsv").write_text(edges_text)
    (root / "labels.tsv").write_text(labels_text)
    if features_text is not None:
        (root / "features.csv").write_text(features_text)
    if meta is not None:
        import json
        (root / "meta.json").write_text(json.dumps(meta))
    return root


def test_smallest_graph(tmp_path):
    root = write_dataset(tmp_path / "d", "0\t1\n", "0\t0\n1\t1\n", "1.0,2.0\n3.0,4.0\n",
                         {"num_classes": 2, "name": "tiny"})
    g = load_graph(root)
    assert g.num_nodes == 2
    assert g.num_edges == 1
    assert g.degrees.tolist() == [1, 1]
    assert g.name == "tiny"


def test_reversed_duplicate_and_self_loop_lines(tmp_path):
    root = write_dataset(tmp_path / "d", "# comment\n0\t1\n1\t0\n0\t1\n2\t2\n",
                         "0\t0\n1\t1\n2\t-1\n", "0\n0\n0\n", {"num_classes": 2})
    g = load_graph(root)
    assert g.num_edges == 1
    assert g.meta["self_loops_dropped"] == 1
    assert g.labels.tolist() == [0, 1, -1]
    assert g.adjacency.diagonal().sum() == 0


@pytest.mark.parametrize("case, match", [
    ("missing_labels", "labels.tsv"),
    ("bad_node", "out of range"),
    ("feature_rows", "feature row count 1 != num_nodes 2"),
    ("non_numeric", "non-numeric"),
])
def test_load_errors(tmp_path, case, match):
    root = tmp_path / case
    edges, labels, feats = "0\t1\n", "0\t0\n1\t1\n", "1\n2\n"
    if case == "bad_node":
        edges = "0\t5\n"
    elif case == "feature_rows":
        feats = "1\n"
    elif case == "non_numeric":
        edges = "0\tx\n"
    write_dataset(root, edges, labels, feats, {"num_classes": 2})
    if case == "missing_labels":
        (root / "labels.tsv").unlink()
    with pytest.raises(GraphFormatError, match=match):
        load_graph(root)


def test_feature_bin_format(tmp_path):
    m = np.arange(6, dtype=np.float32).reshape(2, 3) / 7
    write_feature_bin(tmp_path / "f.bin", m)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == b"SRNCFEAT"
    assert int.from_bytes(raw[8:16], "little") == 2
    assert int.from_bytes(raw[16:24], "little") == 3
    assert len(raw) == 24 + 6 * 4
    np.testing.assert_array_equal(read_feature_bin(tmp_path / "f.bin"), m)


@pytest.mark.parametrize("fmt", ["csv", "bin"])
def test_round_trip(tmp_path, fmt):
    rng = np.random.default_rng(0)
    edges = random_graph(rng, 30, 0.15)
    feats = rng.normal(size=(30, 5))
    if fmt == "bin":
        feats = feats.astype(np.float32).astype(np.float64)
    g = Graph.from_edges(30, edges, feats, rng.integers(-1, 3, 30), 3, name="rt",
                         node_times=rng.integers(0, 5, 30))
    save_graph(g, tmp_path / "a", fmt)
    g1 = load_graph(tmp_path / "a")
    save_graph(g1, tmp_path / "b", fmt)
    g2 = load_graph(tmp_path / "b")
    for h in (g1, g2):
        np.testing.assert_array_equal(h.edge_list(), g.edge_list())
        np.testing.assert_array_equal(h.labels, g.labels)
        assert h.features.tobytes() == g.features.tobytes()
        np.testing.assert_array_equal(h.node_times, g.node_times)


def test_graph_invariants():
    rng = np.random.default_rng(1)
    g = Graph.from_edges(40, random_graph(rng, 40, 0.1), np.zeros((40, 1)), np.zeros(40), 1)
    a = g.adjacency
    assert (a != a.T).nnz == 0
    assert a.diagonal().sum() == 0
    assert set(np.unique(a.data)) <= {1.0}
    assert g.degrees.sum() == 2 * g.num_edges


# --------------------------------------------------------------------------
# normalization


def test_normalize_isolated_node():
    g = make_graph(1, np.empty((0, 2)), num_classes=1, labels=[0])
    np.testing.assert_allclose(normalize_adjacency(g).toarray(), [[1.0]])


def test_normalize_two_nodes():
    g = make_graph(2, [(0, 1)])
    np.testing.assert_allclose(normalize_adjacency(g).toarray(), [[0.5, 0.5], [0.5, 0.5]])


def test_normalize_triangle(triangle):
    np.testing.assert_allclose(normalize_adjacency(triangle).toarray(), np.full((3, 3), 1 / 3))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 50), p=st.floats(0.0, 0.5), seed=st.integers(0, 10_000))
def test_normalize_matches_dense_reference(n, p, seed):
    rng = np.random.default_rng(seed)
    g = make_graph(n, random_graph(rng, n, p), num_classes=1, labels=np.zeros(n))
    op = normalize_adjacency(g).toarray()
    ref = dense_gcn_operator(g.adjacency.toarray())
    np.testing.assert_allclose(op, ref, rtol=0, atol=1e-15)
    assert np.allclose(op, op.T)
    assert (np.diag(op) > 0).all()
    nz = op[op != 0]
    assert (nz > 0).all() and (nz <= 1).all()


# --------------------------------------------------------------------------
# open-set split


def planted(n_per_class, classes, seed=0):
    return synth_sbm_graph(n_per_class * classes, classes, 0.2, 0.01, prior=None, seed=seed)


def test_openset_split_sizes_and_disjointness():
    g = planted(60, 7)
    s = make_openset_split(g, hidden_classes={1, 4, 6}, per_class_train=20, seed=3)
    assert len(s.train_nodes) == 4 * 20
    assert s.known_classes == (0, 2, 3, 5)
    assert s.unknown_class_id == 4
    assert s.num_outputs == 5
    sets = [set(s.train_nodes), set(s.val_nodes), set(s.test_nodes)]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert set(s.train_labels.tolist()) == {0, 1, 2, 3}
    hidden_test = np.isin(g.labels[s.test_nodes], [1, 4, 6])
    assert (s.test_labels[hidden_test] == 4).all()
    assert (s.test_labels[~hidden_test] < 4).all()
    # validation carries unknown-class nodes for model selection
    assert (s.val_labels == 4).any()
    assert s.source_graph is s.target_graph is g


def test_openset_empty_hidden_is_plain_split():
    g = planted(40, 3)
    s = make_openset_split(g, hidden_classes=(), per_class_train=10, seed=0)
    assert s.unknown_class_id == 3
    assert not (s.test_labels == 3).any() and not (s.val_labels == 3).any()


def test_openset_two_class_toy():
    g = make_graph(8, [(i, i + 1) for i in range(7)], labels=[0, 1] * 4)
    s = make_openset_split(g, hidden_classes={1}, per_class_train=2, val_fraction=0.0, seed=0)
    assert s.unknown_class_id == 1
    class1 = g.labels[s.test_nodes] == 1
    assert class1.any()
    assert (s.test_labels[class1] == 1).all()


def test_openset_errors():
    g = planted(10, 3)
    with pytest.raises(ValueError, match="need 20"):
        make_openset_split(g, (), per_class_train=20)
    with pytest.raises(ValueError, match="entire label space"):
        make_openset_split(g, {0, 1, 2}, per_class_train=2)


@given(st.lists(st.integers(-1, 5), min_size=1, max_size=40), st.sets(st.integers(0, 5)))
def test_mask_hidden_idempotent(labels, hidden):
    once = mask_hidden_labels(labels, hidden, 99)
    np.testing.assert_array_equal(mask_hidden_labels(once, hidden, 99), once)
    labels = np.asarray(labels)
    keep = ~np.isin(labels, list(hidden))
    np.testing.assert_array_equal(once[keep], labels[keep])


# --------------------------------------------------------------------------
# temporal split


def test_temporal_degenerate_single_time():
    g = make_graph(5, [(0, 1), (1, 2), (3, 4)])
    s = make_temporal_split(g, np.zeros(5, dtype=int), 0, 0, (0, 0), allow_empty=True)
    assert s.source_graph is g and s.target_graph is g
    assert len(s.val_nodes) == 0 and len(s.test_nodes) == 0


def test_temporal_chain():
    g = make_graph(3, [(0, 1), (1, 2)])
    s = make_temporal_split(g, [1, 2, 3], train_cutoff=1, val_cutoff=2, test_window=(2, 3))
    assert (s.source_graph.num_nodes, s.source_graph.num_edges) == (2, 1)
    assert (s.target_graph.num_nodes, s.target_graph.num_edges) == (3, 2)
    assert s.train_nodes.tolist() == [0] and s.val_nodes.tolist() == [1]
    assert s.test_nodes.tolist() == [2]
    assert s.source_ids.tolist() == [0, 1] and s.target_ids.tolist() == [0, 1, 2]
    assert s.source_to_target.tolist() == [0, 1]
    assert s.kind == "close_set" and s.hidden_classes == ()


def test_temporal_remap_traces_original_ids():
    rng = np.random.default_rng(0)
    times = rng.integers(0, 6, 50)
    g = Graph.from_edges(50, random_graph(rng, 50, 0.1), rng.normal(size=(50, 2)),
                         rng.integers(0, 3, 50), 3)
    s = make_temporal_split(g, times, 1, 3, (3, 5))
    src, tgt = s.source_graph, s.target_graph
    assert (times[s.source_ids] <= 3).all() and (times[s.target_ids] <= 5).all()
    np.testing.assert_array_equal(src.features, g.features[s.source_ids])
    np.testing.assert_array_equal(tgt.labels, g.labels[s.target_ids])
    np.testing.assert_array_equal(s.target_ids[s.source_to_target], s.source_ids)
    assert (times[s.target_ids[s.test_nodes]] > 3).all()


def test_temporal_errors():
    g = make_graph(3, [(0, 1)])
    with pytest.raises(ValueError, match="non-decreasing"):
        make_temporal_split(g, [0, 1, 2], 2, 1, (1, 2))
    with pytest.raises(ValueError, match="empty"):
        make_temporal_split(g, [0, 1, 2], 0, 1, (5, 6))


# --------------------------------------------------------------------------
# SBM


def test_sbm_no_shift_histograms_match():
    cfg = SbmShiftConfig(blocks=2, num_nodes_source=2000, num_nodes_target=2000,
                         label_prior_source=(0.5, 0.5), label_prior_target=(0.5, 0.5), seed=4)
    s = synth_sbm_shift(cfg)
    fs = np.mean(s.source_graph.labels == 0)
    ft = np.mean(s.target_graph.labels == 0)
    # two independent binomial proportions, n=2000: 4 sigma of the difference ~ 0.063
    assert abs(fs - ft) < 0.063


@pytest.mark.parametrize("seed", range(5))
def test_sbm_label_drift(seed):
    cfg = SbmShiftConfig(blocks=2, num_nodes_source=500, num_nodes_target=500, seed=seed)
    s = synth_sbm_shift(cfg)
    assert abs(np.mean(s.target_graph.labels == 0) - 0.3) <= 0.05
    assert abs(np.mean(s.source_graph.labels == 0) - 0.7) <= 0.05
    assert s.kind == "close_set" and len(s.test_nodes) == 500


def test_sbm_deterministic():
    cfg = SbmShiftConfig(seed=11)
    a, b = synth_sbm_shift(cfg), synth_sbm_shift(cfg)
    np.testing.assert_array_equal(a.source_graph.edge_list(), b.source_graph.edge_list())
    np.testing.assert_array_equal(a.target_graph.features, b.target_graph.features)
    np.testing.assert_array_equal(a.train_nodes, b.train_nodes)


def test_sbm_ground_truth_modularity():
    g = synth_sbm_graph(500, 4, intra_p=0.1, inter_p=0.01, seed=0)
    assert modularity(g, g.labels) > 0.4


@pytest.mark.parametrize("kwargs", [
    dict(intra_p=0.01, inter_p=0.1),
    dict(label_prior_source=(0.5, 0.6)),
    dict(num_nodes_target=0),
])
def test_sbm_config_errors(kwargs):
    with pytest.raises(ValueError):
        synth_sbm_shift(SbmShiftConfig(**kwargs))
