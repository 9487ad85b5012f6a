"""Evaluation metrics: error, ranking quality, homogenization and feedback effect."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import InteractionHistory

__all__ = [
    "TestSet",
    "rmse",
    "mse_mae",
    "ndcg_at_k",
    "mean_ndcg",
    "jaccard",
    "homogenization",
    "homogenization_matrix",
    "feedback_effect",
]


@dataclass(frozen=True)
class TestSet:
    """Held-out ``(user, item, rating)`` triples that are never recommended."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    shape: tuple

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ValueError("test arrays must have equal length")
        if len(set(zip(np.asarray(self.users).tolist(), np.asarray(self.items).tolist()))) != len(self.users):
            raise ValueError("test pairs must be distinct")

    def __len__(self) -> int:
        return len(self.users)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[self.users, self.items] = True
        return m


def _pair(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float).ravel()
    t = np.asarray(truths, dtype=float).ravel()
    if p.size == 0 or t.size == 0:
        raise ValueError("empty input")
    if p.size != t.size:
        raise ValueError("preds and truths must have equal length")
    return p, t


def rmse(preds, truths) -> float:
    p, t = _pair(preds, truths)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def mse_mae(preds, truths) -> tuple[float, float]:
    p, t = _pair(preds, truths)
    d = p - t
    return float(np.mean(d**2)), float(np.mean(np.abs(d)))


def _dcg(gains: np.ndarray) -> float:
    discounts = np.log2(np.arange(2, gains.size + 2))
    return float(np.sum(gains / discounts))


def ndcg_at_k(ranked_gains, ideal_gains=None, k=None) -> float:
    """NDCG with linear gains.

    ``ranked_gains`` are the true gains in predicted order; ``ideal_gains``
    defaults to the same multiset sorted descending. All-zero ideal gains
    give 1.
    """
    g = np.asarray(ranked_gains, dtype=float).ravel()
    ideal = np.sort(g)[::-1] if ideal_gains is None else np.asarray(ideal_gains, dtype=float).ravel()
    if (g < 0).any():
        raise ValueError("gains must be non-negative")
    if k is None:
        k = g.size
    if k < 1:
        raise ValueError("k must be >= 1")
    idcg = _dcg(ideal[:k])
    if idcg == 0:
        return 1.0
    return _dcg(g[:k]) / idcg


def mean_ndcg(user_factors, item_factors, test: TestSet, k=None) -> float:
    """Per-user NDCG over the user's test items, averaged over users with test items.

    Items are ordered by predicted score (ties by item index).
    """
    users = np.asarray(test.users)
    items = np.asarray(test.items)
    truth = np.asarray(test.ratings, dtype=float)
    preds = np.einsum("nk,nk->n", user_factors[users], item_factors[items])
    scores = []
    order = np.lexsort((items, users))
    users, items, truth, preds = users[order], items[order], truth[order], preds[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    for idx in np.split(np.arange(users.size), bounds):
        if idx.size == 0:
            continue
        rank = idx[np.lexsort((items[idx], -preds[idx]))]
        scores.append(ndcg_at_k(truth[rank], k=k))
    return float(np.mean(scores))


def jaccard(a: set, b: set) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        raise ValueError("undefined similarity: both sets are empty")
    return len(a & b) / len(union)


def homogenization(history_or_sets, t=None) -> float:
    """Mean pairwise Jaccard similarity of users' cumulative recommended sets.

    Accepts an :class:`InteractionHistory` (sets up to step ``t``) or a list
    of per-user sets.
    """
    if isinstance(history_or_sets, InteractionHistory):
        sets = history_or_sets.item_sets(t)
    else:
        sets = [set(s) for s in history_or_sets]
    if len(sets) < 2:
        raise ValueError("homogenization needs at least two users")
    return float(np.mean([jaccard(a, b) for a, b in itertools.combinations(sets, 2)]))


def homogenization_matrix(item_matrix: np.ndarray) -> float:
    """Same as :func:`homogenization` for a boolean U x I membership matrix."""
    m = np.asarray(item_matrix, dtype=float)
    if m.shape[0] < 2:
        raise ValueError("homogenization needs at least two users")
    inter = m @ m.T
    sizes = m.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    iu = np.triu_indices(m.shape[0], k=1)
    if (union[iu] == 0).any():
        raise ValueError("undefined similarity: both sets are empty")
    return float(np.mean(inter[iu] / union[iu]))


def feedback_effect(metric_on_actual: float, metric_on_shadow: float) -> float:
    """``M(R_t) - M(R_hat_t)``: metric under feedback minus metric under the shadow."""
    return float(metric_on_actual) - float(metric_on_shadow)
