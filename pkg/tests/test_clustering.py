import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph
from oracles import modularity_double_sum, random_graph
from srnc.autodiff import Value, gradcheck, row_softmax
from srnc.clustering import harden, modularity, modularity_loss, one_hot


def test_single_cluster_is_zero(two_triangles):
    assert modularity(two_triangles, np.zeros(6, dtype=int)) == 0.0


def test_two_triangles(two_triangles):
    a = two_triangles.adjacency.toarray()
    oracle = modularity_double_sum(a, [0, 0, 0, 1, 1, 1])
    assert oracle == pytest.approx(5 / 14, abs=1e-12)
    assert modularity(two_triangles, [0, 0, 0, 1, 1, 1]) == pytest.approx(5 / 14, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_singletons(seed):
    rng = np.random.default_rng(seed)
    g = make_graph(12, random_graph(rng, 12, 0.3))
    d = g.degrees.astype(float)
    expected = -np.sum(d ** 2) / (2 * g.num_edges) ** 2
    assert modularity(g, np.arange(12)) == pytest.approx(expected, abs=1e-12)
    assert modularity_double_sum(g.adjacency.toarray(), np.arange(12)) == pytest.approx(expected, abs=1e-12)


def test_empty_graph_errors():
    g = make_graph(3, np.empty((0, 2)))
    with pytest.raises(ValueError):
        modularity(g, [0, 0, 1])
    with pytest.raises(ValueError):
        modularity_loss(g, Value(np.ones((3, 2)) / 2))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 30), p=st.floats(0.05, 0.6), c=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_soft_loss_equals_negative_modularity_at_one_hot(n, p, c, seed):
    rng = np.random.default_rng(seed)
    edges = random_graph(rng, n, p)
    if len(edges) == 0:
        edges = np.array([[0, 1]])
    g = make_graph(n, edges)
    a = rng.integers(0, c, n)
    loss = modularity_loss(g, Value(one_hot(a, c))).item()
    assert abs(loss + modularity_double_sum(g.adjacency.toarray(), a)) < 1e-10
    assert abs(loss + modularity(g, a)) < 1e-10
    assert -1.0 <= modularity(g, a) <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_permutation_of_cluster_ids(seed):
    rng = np.random.default_rng(seed)
    g = make_graph(20, random_graph(rng, 20, 0.2) if True else None)
    if g.num_edges == 0:
        return
    a = rng.integers(0, 5, 20)
    perm = rng.permutation(5)
    assert modularity(g, perm[a]) == pytest.approx(modularity(g, a), abs=1e-14)


@pytest.mark.parametrize("c", [2, 3, 7])
def test_uniform_soft_assignment_is_zero(two_triangles, c):
    q = Value(np.full((6, c), 1.0 / c))
    assert abs(modularity_loss(two_triangles, q).item()) < 1e-14


def test_verbatim_variant(two_triangles):
    q = one_hot([0, 0, 0, 1, 1, 1], 2)
    two_m = 14.0
    d = two_triangles.degrees
    a = two_triangles.adjacency.toarray()
    expected = (np.sum((d @ q) ** 2) - np.trace(q.T @ a @ q)) / two_m
    got = modularity_loss(two_triangles, Value(q), eq6_verbatim=True).item()
    assert got == pytest.approx(expected)


def test_modularity_loss_gradcheck():
    rng = np.random.default_rng(0)
    g = make_graph(12, random_graph(rng, 12, 0.35))
    z = Value(rng.normal(size=(12, 3)), requires_grad=True)
    assert gradcheck(lambda z: modularity_loss(g, row_softmax(z)), [z]) < 1e-4
    assert gradcheck(lambda z: modularity_loss(g, row_softmax(z), collapse_weight=0.5), [z]) < 1e-4


def test_harden():
    q = np.eye(3)[[2, 0, 1, 1]]
    np.testing.assert_array_equal(harden(q), [2, 0, 1, 1])
    assert harden(np.array([[0.5, 0.5]]))[0] == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_harden_invariant_to_row_rescaling(seed):
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.ones(4), 6)
    scaled = q.copy()
    row = rng.integers(0, 6)
    scaled[row] *= 2
    scaled /= scaled.sum(axis=1, keepdims=True)
    np.testing.assert_array_equal(harden(q), harden(scaled))
