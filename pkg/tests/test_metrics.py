import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exhaustive_clustering_acc
from srnc.metrics import (clustering_acc, label_histogram, macro_f1_paper, macro_f1_standard,
                          micro_f1, nmi, per_class_recall)


def test_micro_f1():
    assert micro_f1([0, 1, 2], [0, 1, 2]) == 1.0
    assert micro_f1([0, 1, 1, 2], [0, 1, 2, 2]) == 0.75
    assert micro_f1([1, 0], [0, 1]) == 0.0
    with pytest.raises(ValueError):
        micro_f1([], [])


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=50))
def test_micro_is_one_minus_hamming(pairs):
    pred, truth = map(np.array, zip(*pairs))
    assert micro_f1(pred, truth) == pytest.approx(1 - np.mean(pred != truth))


def test_macro_paper():
    assert macro_f1_paper([0, 1, 1, 2], [0, 1, 2, 2], 3) == pytest.approx((1 + 1 + 0.5) / 3)
    assert macro_f1_paper([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert macro_f1_paper([1, 1], [1, 1], 3, skip_empty=True) == 1.0
    assert macro_f1_paper([1, 1], [1, 1], 3) == pytest.approx(1 / 3)
    np.testing.assert_allclose(per_class_recall([0, 1, 1, 2], [0, 1, 2, 2], 3), [1, 1, 0.5])


def test_macro_paper_equals_micro_when_balanced_uniform_recall():
    truth = np.repeat([0, 1, 2], 4)
    pred = truth.copy()
    pred[[0, 4, 8]] = (truth[[0, 4, 8]] + 1) % 3  # one miss per class
    assert macro_f1_paper(pred, truth, 3) == pytest.approx(micro_f1(pred, truth))


def test_macro_standard():
    # per-class F1: c0 = 1, c1 = 2/3, c2 = 2/3
    assert macro_f1_standard([0, 1, 1, 2], [0, 1, 2, 2], 3) == pytest.approx((1 + 2 / 3 + 2 / 3) / 3)


def test_clustering_acc_examples():
    assert clustering_acc([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert clustering_acc([0, 1, 0, 1], [0, 0, 1, 1]) == 0.5
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 4, 30)
    perm = rng.permutation(4)
    assert clustering_acc(perm[truth], truth) == 1.0
    # more classes than clusters
    assert clustering_acc([0, 0, 0, 0], [0, 1, 2, 2]) == 0.5


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 25), st.integers(0, 10**6))
def test_clustering_acc_matches_exhaustive(k, c, n, seed):
    rng = np.random.default_rng(seed)
    assign, truth = rng.integers(0, k, n), rng.integers(0, c, n)
    assert clustering_acc(assign, truth) == pytest.approx(exhaustive_clustering_acc(assign, truth))


def test_nmi_examples():
    assert nmi([0, 0, 1, 1, 2], [5, 5, 3, 3, 1]) == pytest.approx(1.0)
    assert nmi([0, 0, 0, 0], [0, 0, 1, 1]) == 0.0
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-15)
    assert nmi([3, 3, 3], [1, 1, 1]) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 40), st.integers(0, 10**6))
def test_nmi_range_and_sklearn_agreement(k, c, n, seed):
    from sklearn.metrics import normalized_mutual_info_score
    rng = np.random.default_rng(seed)
    a, t = rng.integers(0, k, n), rng.integers(0, c, n)
    value = nmi(a, t)
    assert 0.0 <= value <= 1.0
    assert nmi(a, a) == pytest.approx(1.0)
    if len(np.unique(a)) > 1 and len(np.unique(t)) > 1:
        ref = normalized_mutual_info_score(t, a, average_method="geometric")
        assert value == pytest.approx(ref, abs=1e-10)


def test_label_histogram():
    np.testing.assert_allclose(label_histogram([0, 1, 1, -1, 2, 1], 4), [0.2, 0.6, 0.2, 0.0])
