import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recloop.core import history_from_arrays
from recloop.metrics import (
    TestSet,
    feedback_effect,
    homogenization,
    homogenization_matrix,
    jaccard,
    mean_ndcg,
    mse_mae,
    ndcg_at_k,
    rmse,
)

small_sets = st.sets(st.integers(0, 12), max_size=8)


def test_rmse_examples():
    assert rmse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert rmse([1], [3]) == 2.0
    assert rmse([0, 0], [1, 2]) == pytest.approx(math.sqrt(2.5), abs=1e-12)
    with pytest.raises(ValueError, match="empty"):
        rmse([], [])
    with pytest.raises(ValueError):
        rmse([1, 2], [1])


def test_mse_mae_examples():
    assert mse_mae([4, 5], [4, 5]) == (0.0, 0.0)
    assert mse_mae([0], [2]) == (4.0, 2.0)
    assert mse_mae([0, 0], [1, 2]) == (2.5, 1.5)
    with pytest.raises(ValueError):
        mse_mae([], [])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=30))
def test_rmse_squared_is_mse(pairs):
    p, t = zip(*pairs)
    assert abs(rmse(p, t) ** 2 - mse_mae(p, t)[0]) <= 1e-12 * max(1.0, mse_mae(p, t)[0])


def test_ndcg_examples():
    assert ndcg_at_k([5, 4, 2]) == 1.0
    assert ndcg_at_k([3.2]) == 1.0
    expected = (1 + 2 / math.log2(3)) / (2 + 1 / math.log2(3))
    assert ndcg_at_k([1, 2], k=2) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.8597, abs=1e-4)
    assert ndcg_at_k([0, 0, 0]) == 1.0
    with pytest.raises(ValueError):
        ndcg_at_k([1, 2], k=0)
    with pytest.raises(ValueError):
        ndcg_at_k([-1, 2])


def test_ndcg_truncation():
    # only the first position counts at k=1
    assert ndcg_at_k([1, 3], k=1) == pytest.approx(1 / 3)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_ndcg_bounds_ideal_and_scale_invariance(gains, lam):
    value = ndcg_at_k(gains)
    assert -1e-12 <= value <= 1 + 1e-12
    assert ndcg_at_k(sorted(gains, reverse=True)) == pytest.approx(1.0, abs=1e-12)
    scaled = ndcg_at_k([lam * g for g in gains])
    assert abs(scaled - value) <= 1e-12


def test_mean_ndcg_per_user_average():
    # user 0: predicted order matches truth; user 1: reversed
    users = np.array([0, 0, 1, 1])
    items = np.array([0, 1, 0, 1])
    truth = np.array([5.0, 1.0, 5.0, 1.0])
    test = TestSet(users, items, truth, (2, 2))
    uf = np.array([[1.0], [-1.0]])
    vf = np.array([[2.0], [1.0]])
    reversed_value = ndcg_at_k([1.0, 5.0])
    assert mean_ndcg(uf, vf, test) == pytest.approx((1.0 + reversed_value) / 2)


def test_mean_ndcg_ties_break_by_item_index():
    test = TestSet(np.array([0, 0]), np.array([0, 1]), np.array([1.0, 4.0]), (1, 2))
    flat = np.zeros((2, 1))
    assert mean_ndcg(np.ones((1, 1)), flat, test) == pytest.approx(ndcg_at_k([1.0, 4.0]))


def test_testset_validation():
    with pytest.raises(ValueError):
        TestSet(np.array([0, 0]), np.array([1, 1]), np.array([1.0, 2.0]), (1, 2))
    t = TestSet(np.array([0]), np.array([1]), np.array([2.0]), (2, 2))
    assert t.mask().sum() == 1 and t.mask()[0, 1]


def test_jaccard_examples():
    assert jaccard({1, 2}, {1, 2}) == 1.0
    assert jaccard({1}, {2}) == 0.0
    assert jaccard({1, 2, 3}, {2, 3, 4}) == 0.5
    with pytest.raises(ValueError, match="undefined similarity"):
        jaccard(set(), set())


@settings(max_examples=1000, deadline=None)
@given(small_sets, small_sets)
def test_jaccard_axioms(a, b):
    if not a and not b:
        return
    j = jaccard(a, b)
    assert j == jaccard(b, a)
    assert 0.0 <= j <= 1.0
    assert (j == 1.0) == (a == b)


def test_homogenization_examples():
    assert homogenization([{1, 2}, {1, 2}, {1, 2}]) == 1.0
    assert homogenization([{1}, {2}, {3}]) == 0.0
    assert homogenization([{1, 2}, {2, 3}, {5, 6}]) == pytest.approx(1 / 9, abs=1e-15)
    with pytest.raises(ValueError):
        homogenization([{1}])


def test_homogenization_from_history_uses_cumulative_sets():
    h = history_from_arrays((2, 4), [([0, 1], [0, 1], [1.0, 1.0], [0.25, 0.25]),
                                     ([0, 1], [1, 0], [1.0, 1.0], [1 / 3, 1 / 3])])
    assert homogenization(h, 1) == 0.0
    assert homogenization(h, 2) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_homogenization_matrix_agrees_with_sets(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((5, 7)) < 0.4
    m[:, 0] = True
    sets = [set(np.flatnonzero(row).tolist()) for row in m]
    assert homogenization_matrix(m) == pytest.approx(homogenization(sets), abs=1e-12)


def test_feedback_effect():
    assert feedback_effect(2.0, 2.0) == 0.0
    assert feedback_effect(1.5, 1.2) == pytest.approx(0.3)
    assert feedback_effect(0.7, 1.9) == -feedback_effect(1.9, 0.7)
