"""Weighted matrix factorization and recommendation policies.

The factorization models follow the scikit-learn estimator API: ``X`` is an
``(n, 2)`` array of (user, item) indices, ``y`` the ratings and
``sample_weight`` the per-observation weights produced by
:mod:`recloop.estimators`. Both minimize

    sum_n w_n (y_n - theta_u . beta_i)^2 + reg * (||theta||^2 + ||beta||^2)

Policies map fitted parameters and the history to per-user item
distributions whose entries are the exact propensities logged at
recommendation time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_pairs, check_ratings
from .core import InteractionHistory, LatentParams, PropensityLog, RecommendationMatrix
from .environments import UserExhaustedError, exposure_table_pan
from .estimators import WeightAssignment

__all__ = [
    "MFConfig",
    "WeightedALS",
    "WeightedMFSGD",
    "weighted_mf_objective",
    "weighted_mf_gradient",
    "fit_weighted_als",
    "fit_weighted_sgd",
    "predict",
    "Policy",
    "policy_table",
    "policy_probs",
    "inclusion_probs",
    "recommend",
    "sample_from_table",
    "table_from_feasible",
    "UserExhaustedError",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MFConfig:
    """Factorization hyperparameters.

    ``lr``, ``epochs`` and ``batch_size`` only affect the SGD trainer; the
    SGD defaults are stand-ins, not tuned values.
    """

    n_factors: int = 8
    reg: float = 0.1
    als_sweeps: int = 15
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    init_scale: Optional[float] = None
    normalize_weights: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_factors < 1 or self.als_sweeps < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid MFConfig")
        if self.reg < 0:
            raise ValueError("reg must be >= 0")


def _normalized(w: np.ndarray, normalize: bool) -> np.ndarray:
    if normalize and w.size and w.sum() > 0:
        return w * (w.size / w.sum())
    return w


def weighted_mf_objective(user_factors, item_factors, users, items, y, w, reg) -> float:
    err = y - np.einsum("nk,nk->n", user_factors[users], item_factors[items])
    penalty = reg * (np.sum(user_factors**2) + np.sum(item_factors**2))
    return float(np.dot(w, err**2) + penalty)


def weighted_mf_gradient(user_factors, item_factors, users, items, y, w, reg, scale=1.0):
    """Analytic gradient of :func:`weighted_mf_objective` w.r.t. both factor matrices.

    ``scale`` multiplies the data term only (minibatch rescaling).
    """
    err = y - np.einsum("nk,nk->n", user_factors[users], item_factors[items])
    coef = (-2.0 * scale) * (w * err)
    g_user = 2.0 * reg * user_factors
    g_item = 2.0 * reg * item_factors
    np.add.at(g_user, users, coef[:, None] * item_factors[items])
    np.add.at(g_item, items, coef[:, None] * user_factors[users])
    return g_user, g_item


class _MFBase(RegressorMixin, BaseEstimator):
    def _dims(self, users, items):
        n_users = self.n_users if self.n_users is not None else int(users.max(initial=-1)) + 1
        n_items = self.n_items if self.n_items is not None else int(items.max(initial=-1)) + 1
        return n_users, n_items

    def _init_scale(self):
        return self.init_scale if self.init_scale is not None else 0.1 / math.sqrt(self.n_factors)

    def predict(self, X):
        check_is_fitted(self, "user_factors_")
        users, items = check_pairs(X, self.user_factors_.shape[0], self.item_factors_.shape[0])
        return np.einsum("nk,nk->n", self.user_factors_[users], self.item_factors_[items])

    def objective(self, X, y, sample_weight=None) -> float:
        check_is_fitted(self, "user_factors_")
        users, items = check_pairs(X)
        y, w = check_ratings(X, y, sample_weight)
        w = _normalized(w, self.normalize_weights)
        return weighted_mf_objective(self.user_factors_, self.item_factors_, users, items, y, w, self.reg)

    def to_params(self, noise_variance: float = 1.0) -> LatentParams:
        check_is_fitted(self, "user_factors_")
        return LatentParams(self.user_factors_, self.item_factors_, noise_variance)


class WeightedALS(_MFBase):
    """Weighted matrix factorization by alternating ridge solves.

    Item factors start from ``N(0, init_scale^2)`` (default ``0.1/sqrt(K)``)
    and user factors are solved first. Each half-sweep solves its block
    exactly, so ``objective_path_`` (recorded after every half-sweep) never
    increases.

    Parameters
    ----------
    n_users, n_items : int, optional
        Matrix dimensions; inferred from ``X`` when omitted.
    n_factors : int
    reg : float
        Ridge penalty ``lambda``. With ``reg=0`` every row that has data must
        have a non-singular Gram matrix.
    n_sweeps : int
    normalize_weights : bool
        Rescale ``sample_weight`` to mean 1 before fitting, which keeps the
        data/penalty balance independent of the weight scheme's scale.
    random_state : int, Generator or None
    """

    def __init__(
        self,
        n_users=None,
        n_items=None,
        n_factors=8,
        reg=0.1,
        n_sweeps=15,
        init_scale=None,
        normalize_weights=True,
        random_state=None,
    ):
        self.n_users = n_users
        self.n_items = n_items
        self.n_factors = n_factors
        self.reg = reg
        self.n_sweeps = n_sweeps
        self.init_scale = init_scale
        self.normalize_weights = normalize_weights
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None, init_item_factors=None):
        """Fit; ``init_item_factors`` replaces the random start (warm start)."""
        users, items = check_pairs(X, self.n_users, self.n_items)
        y, w = check_ratings(X, y, sample_weight)
        w = _normalized(w, self.normalize_weights)
        n_users, n_items = self._dims(users, items)
        k = self.n_factors
        rng = np.random.default_rng(self.random_state)
        item_f = rng.normal(0.0, self._init_scale(), size=(n_items, k))
        if init_item_factors is not None:
            item_f = _check_init(init_item_factors, (n_items, k))
        user_f = np.zeros((n_users, k))

        n = len(y)
        by_user = sp.csr_matrix((w, (users, np.arange(n))), shape=(n_users, n))
        by_item = sp.csr_matrix((w, (items, np.arange(n))), shape=(n_items, n))
        path = [weighted_mf_objective(user_f, item_f, users, items, y, w, self.reg)]
        for _ in range(self.n_sweeps):
            user_f = _ridge_rows(by_user, item_f[items], y, self.reg)
            path.append(weighted_mf_objective(user_f, item_f, users, items, y, w, self.reg))
            item_f = _ridge_rows(by_item, user_f[users], y, self.reg)
            path.append(weighted_mf_objective(user_f, item_f, users, items, y, w, self.reg))
        self.user_factors_ = user_f
        self.item_factors_ = item_f
        self.objective_path_ = np.array(path)
        return self


def _check_init(a, shape) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.shape != shape or not np.isfinite(a).all():
        raise ValueError(f"initial factors must be finite with shape {shape}")
    return a


def _ridge_rows(weights_by_row: sp.csr_matrix, other: np.ndarray, y: np.ndarray, reg: float) -> np.ndarray:
    """Solve ``(sum w o o^T + reg I) x = sum w y o`` for every row.

    ``other[n]`` is the fixed factor paired with observation ``n``.
    """
    n_rows = weights_by_row.shape[0]
    k = other.shape[1]
    outer = (other[:, :, None] * other[:, None, :]).reshape(-1, k * k)
    gram = np.asarray(weights_by_row @ outer).reshape(n_rows, k, k)
    rhs = np.asarray(weights_by_row @ (y[:, None] * other))
    has_data = np.asarray(weights_by_row.sum(axis=1)).ravel() > 0
    out = np.zeros((n_rows, k))
    if not has_data.any():
        return out
    g = gram[has_data] + reg * np.eye(k)
    if reg == 0:
        if (np.linalg.cond(g) > 1e12).any():
            raise np.linalg.LinAlgError("singular system with reg=0: increase regularization")
    out[has_data] = np.linalg.solve(g, rhs[has_data][..., None])[..., 0]
    return out


class WeightedMFSGD(_MFBase):
    """Weighted matrix factorization trained by minibatch Adam.

    Raises ``FloatingPointError`` ("step size too large") when the full
    objective exceeds ten times its initial value after an epoch.
    """

    def __init__(
        self,
        n_users=None,
        n_items=None,
        n_factors=16,
        reg=0.0,
        lr=1e-3,
        n_epochs=50,
        batch_size=256,
        init_scale=None,
        normalize_weights=True,
        random_state=None,
    ):
        self.n_users = n_users
        self.n_items = n_items
        self.n_factors = n_factors
        self.reg = reg
        self.lr = lr
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.init_scale = init_scale
        self.normalize_weights = normalize_weights
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None, init_factors=None):
        """Fit; ``init_factors=(user_factors, item_factors)`` replaces the random start."""
        users, items = check_pairs(X, self.n_users, self.n_items)
        y, w = check_ratings(X, y, sample_weight)
        w = _normalized(w, self.normalize_weights)
        n_users, n_items = self._dims(users, items)
        rng = np.random.default_rng(self.random_state)
        scale = self._init_scale()
        params = [
            rng.normal(0.0, scale, size=(n_users, self.n_factors)),
            rng.normal(0.0, scale, size=(n_items, self.n_factors)),
        ]
        if init_factors is not None:
            params = [
                _check_init(init_factors[0], (n_users, self.n_factors)),
                _check_init(init_factors[1], (n_items, self.n_factors)),
            ]
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        beta1, beta2, eps = 0.9, 0.999, 1e-8

        def full_objective():
            return weighted_mf_objective(params[0], params[1], users, items, y, w, self.reg)

        initial = full_objective()
        path = [initial]
        n = len(y)
        step = 0
        for _ in range(self.n_epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = order[start : start + self.batch_size]
                grads = weighted_mf_gradient(
                    params[0], params[1], users[batch], items[batch], y[batch], w[batch],
                    self.reg, scale=n / len(batch),
                )
                step += 1
                for j in range(2):
                    m[j] = beta1 * m[j] + (1 - beta1) * grads[j]
                    v[j] = beta2 * v[j] + (1 - beta2) * grads[j] ** 2
                    m_hat = m[j] / (1 - beta1**step)
                    v_hat = v[j] / (1 - beta2**step)
                    params[j] = params[j] - self.lr * m_hat / (np.sqrt(v_hat) + eps)
            current = full_objective()
            path.append(current)
            if not np.isfinite(current) or current > 10 * max(initial, 1e-300):
                raise FloatingPointError("divergence detected: step size too large")
        self.user_factors_, self.item_factors_ = params
        self.objective_path_ = np.array(path)
        return self


# ---------------------------------------------------------------------------
# history-level wrappers
# ---------------------------------------------------------------------------


def _training_arrays(history: InteractionHistory, weights: WeightAssignment):
    obs = history.observations
    if not (
        np.array_equal(weights.steps, obs["s"])
        and np.array_equal(weights.users, obs["u"])
        and np.array_equal(weights.items, obs["i"])
    ):
        raise ValueError("weights must cover exactly the observed pairs of the history")
    return np.column_stack([obs["u"], obs["i"]]), obs["r"], weights.weights


def _check_solvable(history: InteractionHistory, cfg: MFConfig) -> None:
    if cfg.reg > 0:
        return
    obs = history.observations
    for idx, n in ((obs["u"], history.n_users), (obs["i"], history.n_items)):
        counts = np.bincount(idx, minlength=n)
        if (counts < cfg.n_factors).any():
            raise ValueError("increase regularization: some rows have fewer observations than K")


def fit_weighted_als(
    history: InteractionHistory,
    weights: WeightAssignment,
    cfg: MFConfig,
    seed: Optional[int] = None,
    init: Optional[LatentParams] = None,
) -> LatentParams:
    """Weighted ALS on a history; ``init`` warm-starts from earlier factors."""
    X, y, w = _training_arrays(history, weights)
    _check_solvable(history, cfg)
    model = WeightedALS(
        history.n_users, history.n_items, cfg.n_factors, cfg.reg, cfg.als_sweeps,
        cfg.init_scale, cfg.normalize_weights, cfg.seed if seed is None else seed,
    ).fit(X, y, w, init_item_factors=None if init is None else init.item_vectors)
    return model.to_params()


def fit_weighted_sgd(
    history: InteractionHistory,
    weights: WeightAssignment,
    cfg: MFConfig,
    seed: Optional[int] = None,
    init: Optional[LatentParams] = None,
) -> LatentParams:
    X, y, w = _training_arrays(history, weights)
    model = WeightedMFSGD(
        history.n_users, history.n_items, cfg.n_factors, cfg.reg, cfg.lr, cfg.epochs,
        cfg.batch_size, cfg.init_scale, cfg.normalize_weights, cfg.seed if seed is None else seed,
    ).fit(X, y, w, init_factors=None if init is None else (init.user_vectors, init.item_vectors))
    return model.to_params()


def predict(params: LatentParams, u: int, i: int) -> float:
    return float(params.user_vectors[u] @ params.item_vectors[i])


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

POLICY_KINDS = ("uniform_random", "topn_epsilon", "softmax", "pan_exposure")
_ALIASES = {"uniform": "uniform_random", "topn": "topn_epsilon"}


@dataclass(frozen=True)
class Policy:
    """Recommendation policy.

    ``n`` is the number of items per user per step; ``env`` is only used by
    ``pan_exposure``. Without fitted parameters every kind except
    ``pan_exposure`` falls back to uniform over feasible items.
    """

    kind: str = "topn_epsilon"
    n: int = 1
    epsilon: float = 0.1
    tau: float = 1.0
    no_repeat: bool = True
    env: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.n < 1 or not 0 <= self.epsilon <= 1 or self.tau <= 0:
            raise ValueError("invalid policy parameters")
        if kind == "pan_exposure" and self.env is None:
            raise ValueError("pan_exposure needs an environment")


def _feasible_mask(policy: Policy, history: InteractionHistory, exclude) -> np.ndarray:
    feasible = np.ones(history.shape, dtype=bool)
    if policy.no_repeat:
        feasible &= ~history.consumed
    if exclude is not None:
        feasible &= ~np.asarray(exclude, dtype=bool)
    counts = feasible.sum(axis=1)
    if (counts == 0).any():
        raise UserExhaustedError(f"user {int(np.argmin(counts))} is exhausted")
    return feasible


def _top_n_mask(scores: np.ndarray, feasible: np.ndarray, n: int) -> np.ndarray:
    n_users, n_items = scores.shape
    masked = np.where(feasible, scores, -np.inf)
    # stable sort on negated scores: ties go to the lowest item index
    order = np.argsort(-masked, axis=1, kind="stable")[:, :n]
    top = np.zeros_like(feasible)
    np.put_along_axis(top, order, True, axis=1)
    return top & feasible


def policy_table(
    policy: Policy,
    params: Optional[LatentParams],
    history: InteractionHistory,
    exclude: Optional[np.ndarray] = None,
) -> np.ndarray:
    """U x I table; row u is user u's distribution over feasible items."""
    if policy.kind == "pan_exposure":
        return exposure_table_pan(policy.env, history, exclude)
    return table_from_feasible(policy, params, _feasible_mask(policy, history, exclude))


def table_from_feasible(policy: Policy, params: Optional[LatentParams], feasible: np.ndarray) -> np.ndarray:
    """Policy distribution restricted to an explicit feasibility mask."""
    counts = feasible.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise UserExhaustedError("a user has no feasible item left")
    uniform = feasible / counts
    if params is None or policy.kind == "uniform_random":
        return uniform
    scores = params.predict_all()
    if policy.kind == "topn_epsilon":
        top = _top_n_mask(scores, feasible, policy.n)
        top_part = top / top.sum(axis=1, keepdims=True)
        return (1.0 - policy.epsilon) * top_part + policy.epsilon * uniform
    if policy.kind == "softmax":
        z = np.where(feasible, scores / policy.tau, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    raise ValueError(f"policy kind {policy.kind!r} needs a history")


def policy_probs(
    policy: Policy,
    params: Optional[LatentParams],
    history: InteractionHistory,
    u: int,
    exclude: Optional[np.ndarray] = None,
) -> np.ndarray:
    return policy_table(policy, params, history, exclude)[u]


def inclusion_probs(p: np.ndarray, n: int) -> np.ndarray:
    """Marginal inclusion probabilities for drawing ``n`` distinct items.

    ``n * p`` with any entry above 1 capped and the excess redistributed
    proportionally over the rest; entries sum to ``n``.
    """
    p = np.asarray(p, dtype=float)
    if n == 1:
        return p.copy()
    if np.count_nonzero(p) < n:
        raise UserExhaustedError("fewer feasible items than recommendations per step")
    pi = n * p
    capped = np.zeros(p.shape, dtype=bool)
    while (pi > 1.0 + 1e-12).any():
        capped |= pi >= 1.0
        rest = ~capped
        remaining = n - capped.sum()
        pi = np.where(capped, 1.0, p * remaining / p[rest].sum())
    return np.minimum(pi, 1.0)


def _systematic(pi: np.ndarray, u0: float) -> np.ndarray:
    """Madow systematic sampling: item j is drawn iff an arithmetic point falls in its slot."""
    n = int(round(pi.sum()))
    edges = np.cumsum(pi)
    points = u0 + np.arange(n)
    idx = np.searchsorted(edges, points, side="right")
    last = np.flatnonzero(pi > 0)[-1]
    return np.minimum(idx, last)


def sample_from_table(table: np.ndarray, n: int, rng: np.random.Generator):
    """Draw ``n`` distinct items per row; returns ``(users, items, inclusion_table)``."""
    n_users = table.shape[0]
    starts = rng.random(n_users)
    if n == 1:
        pi = np.asarray(table, dtype=float)
    else:
        pi = np.vstack([inclusion_probs(table[u], n) for u in range(n_users)])
    chosen = [_systematic(pi[u], starts[u]) for u in range(n_users)]
    users = np.repeat(np.arange(n_users), [len(c) for c in chosen])
    return users, np.concatenate(chosen), pi


def recommend(
    policy: Policy,
    params: Optional[LatentParams],
    history: InteractionHistory,
    rng: np.random.Generator,
    exclude: Optional[np.ndarray] = None,
) -> tuple[RecommendationMatrix, PropensityLog]:
    """Sample ``policy.n`` distinct items per user and log their propensities.

    Items are drawn by systematic sampling on the inclusion probabilities of
    :func:`inclusion_probs`, whose marginals are exact, so the logged value is
    the true probability that the pair is recommended at this step (for
    ``n = 1``, the :func:`policy_probs` entry itself).
    """
    table = policy_table(policy, params, history, exclude)
    users, items, pi = sample_from_table(table, policy.n, rng)
    t = history.horizon + 1
    rec = RecommendationMatrix.from_pairs(history.shape, users, items, t)
    log = PropensityLog(t, users, items, pi[users, items], table=pi)
    return rec, log
