"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array, check_consistent_length


def check_pairs(X, n_users=None, n_items=None) -> tuple[np.ndarray, np.ndarray]:
    """Validate an ``(n, 2)`` array of (user, item) indices."""
    X = check_array(X, dtype=None, ensure_min_samples=0)
    if X.shape[1] != 2:
        raise ValueError(f"X must have two columns (user, item), got {X.shape[1]}")
    if X.size and not np.all(np.equal(np.mod(X, 1), 0)):
        raise ValueError("user and item indices must be integers")
    X = X.astype(np.int64)
    if (X < 0).any():
        raise ValueError("indices must be non-negative")
    if n_users is not None and X.size and X[:, 0].max() >= n_users:
        raise ValueError("user index out of range")
    if n_items is not None and X.size and X[:, 1].max() >= n_items:
        raise ValueError("item index out of range")
    return X[:, 0], X[:, 1]


def check_ratings(X, y, sample_weight=None):
    y = check_array(y, ensure_2d=False, dtype=np.float64, ensure_min_samples=0)
    check_consistent_length(X, y)
    if sample_weight is None:
        w = np.ones(len(y))
    else:
        w = check_array(sample_weight, ensure_2d=False, dtype=np.float64, ensure_min_samples=0)
        check_consistent_length(y, w)
        if (w < 0).any():
            raise ValueError("sample weights must be non-negative")
    return y, w


def check_probability_vector(p, atol: float = 1e-12) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if (p < 0).any() or abs(p.sum() - 1.0) > atol * max(1, p.size):
        raise ValueError("not a probability vector")
    return p
