"""Exhaustive-enumeration oracle for tiny discrete worlds.

A :class:`TinyWorld` has at most six user-item pairs and a rating support of
at most three values. With a horizon of at most three steps, every
recommendation trajectory and every rating outcome can be listed together
with its exact probability. That gives two independent quantities:

* :func:`exact_causal_objective` -- the feedback-free objective
  ``sum_s sum_{u,i} E_{R ~ P(R | do(A_ui = 1))}[log P_params(R | A_ui = 1)]``,
  enumerated directly from the interventional rating law. Terms with
  ``A = 0`` are parameter-free constants and are left out, matching the
  weight schemes. The do-operator cuts every dependence on the deployed
  policy, so no policy enters this sum.
* :func:`expected_estimator_value` -- the exact expectation of a weighted
  log-likelihood estimator over all trajectories generated by a policy.

An estimator is unbiased on an instance when the two agree.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Union

import numpy as np

from .core import (
    InteractionHistory,
    LatentParams,
    PropensityLog,
    RatingMatrix,
    RecommendationMatrix,
    record_step,
)
from .estimators import WeightAssignment, weights_for

__all__ = [
    "OracleLimitError",
    "TinyWorld",
    "random_tiny_world",
    "uniform_policy",
    "feedback_policy",
    "model_policy",
    "gaussian_loglik",
    "enumerate_trajectories",
    "exact_causal_objective",
    "expected_estimator_value",
    "expected_step_weights",
    "MAX_PAIRS",
    "MAX_HORIZON",
    "MAX_SUPPORT",
]

MAX_PAIRS = 6
MAX_HORIZON = 3
MAX_SUPPORT = 3

Policy = Callable[[InteractionHistory], np.ndarray]


class OracleLimitError(ValueError):
    pass


@dataclass(frozen=True)
class TinyWorld:
    """Discrete interventional rating law ``P(R_ui = v | do(A_ui = 1))``.

    ``rating_probs[u, i]`` is a distribution over ``rating_values``. With
    ``layout="global"`` exactly one pair is recommended per step; with
    ``layout="per_user"`` every user receives one item per step.
    """

    rating_values: np.ndarray
    rating_probs: np.ndarray
    layout: str = "global"
    no_repeat: bool = True
    similarity: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.rating_values, dtype=float)
        p = np.asarray(self.rating_probs, dtype=float)
        if p.ndim != 3 or p.shape[2] != v.size:
            raise ValueError("rating_probs must have shape (U, I, len(rating_values))")
        if (v == 0).any():
            raise ValueError("rating 0 is reserved for 'not observed'")
        if (p < 0).any() or not np.allclose(p.sum(axis=2), 1.0):
            raise ValueError("rating_probs rows must be distributions")
        object.__setattr__(self, "rating_values", v)
        object.__setattr__(self, "rating_probs", p)
        if self.similarity is None:
            object.__setattr__(self, "similarity", np.eye(p.shape[1]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rating_probs.shape[:2]

    @property
    def n_pairs(self) -> int:
        return self.shape[0] * self.shape[1]

    def empty_history(self) -> InteractionHistory:
        return InteractionHistory(*self.shape, n_per_step=1, no_repeat=self.no_repeat, layout=self.layout)

    def check_limits(self, t: int) -> None:
        if self.n_pairs > MAX_PAIRS or t > MAX_HORIZON or self.rating_values.size > MAX_SUPPORT:
            raise OracleLimitError(
                f"oracle limit exceeded: U*I={self.n_pairs} (max {MAX_PAIRS}), "
                f"t={t} (max {MAX_HORIZON}), support={self.rating_values.size} (max {MAX_SUPPORT})"
            )


def random_tiny_world(
    rng: np.random.Generator,
    *,
    layout: str = "global",
    no_repeat: bool = True,
    shape: Optional[tuple[int, int]] = None,
) -> TinyWorld:
    """A random world within the oracle limits (ratings on a subset of 1..5)."""
    if shape is None:
        options = [(1, 2), (1, 3), (2, 2), (2, 3), (3, 2), (1, 4), (1, 5), (1, 6)]
        shape = options[rng.integers(len(options))]
    n_values = int(rng.integers(2, MAX_SUPPORT + 1))
    values = np.sort(rng.choice(np.arange(1, 6), size=n_values, replace=False)).astype(float)
    probs = rng.dirichlet(np.ones(n_values), size=shape)
    sim = rng.uniform(0, 1, size=(shape[1], shape[1]))
    return TinyWorld(values, probs, layout, no_repeat, sim)


# ---------------------------------------------------------------------------
# policies: history -> propensity table
# ---------------------------------------------------------------------------


def _feasible(world: TinyWorld, history: InteractionHistory) -> np.ndarray:
    if world.no_repeat:
        return ~history.consumed
    return np.ones(world.shape, dtype=bool)


def _normalize(world: TinyWorld, weights: np.ndarray) -> np.ndarray:
    if world.layout == "global":
        total = weights.sum()
        if total <= 0:
            raise ValueError("no feasible pair left")
        return weights / total
    totals = weights.sum(axis=1, keepdims=True)
    if (totals <= 0).any():
        raise ValueError("a user has no feasible item left")
    return weights / totals


def uniform_policy(world: TinyWorld) -> Policy:
    """Uniform over the feasible (remaining) pairs or items."""

    def probs(history: InteractionHistory) -> np.ndarray:
        return _normalize(world, _feasible(world, history).astype(float))

    return probs


def feedback_policy(world: TinyWorld, strength: float = 1.5) -> Policy:
    """Softmax over feasible pairs of a score built from past ratings.

    ``score_ui = strength * sum_{past (v, j)} R_vj * (sim_ij + [v == u])``, so
    what was rated highly pulls similar items forward -- a genuine
    A -> R -> A loop with strictly positive propensity on feasible pairs.
    """

    def probs(history: InteractionHistory) -> np.ndarray:
        score = np.zeros(world.shape)
        for st in history.steps:
            for v, j, r in zip(st.users, st.items, st.ratings):
                score += r * world.similarity[:, j][None, :]
                score[v] += r
        w = np.exp(strength * (score - score.max())) * _feasible(world, history)
        return _normalize(world, w)

    return probs


def model_policy(world: TinyWorld, fit: Callable, policy) -> Policy:
    """Policy driven by a fitted model: ``fit(history) -> LatentParams``.

    ``policy`` is a :class:`recloop.recommenders.Policy`; only the
    ``per_user`` layout is supported.
    """
    from .recommenders import policy_table

    if world.layout != "per_user":
        raise ValueError("model_policy needs the per_user layout")

    def probs(history: InteractionHistory) -> np.ndarray:
        params = fit(history) if history.horizon else None
        return policy_table(policy, params, history)

    return probs


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------


def gaussian_loglik(params: LatentParams, users, items, ratings) -> np.ndarray:
    """``log N(r | theta_u . beta_i, sigma^2)`` per observation."""
    u = np.asarray(users, dtype=int)
    i = np.asarray(items, dtype=int)
    mean = np.einsum("nk,nk->n", params.user_vectors[u], params.item_vectors[i])
    var = params.noise_variance
    r = np.asarray(ratings, dtype=float)
    return -0.5 * math.log(2 * math.pi * var) - (r - mean) ** 2 / (2 * var)


def _step_options(world: TinyWorld, table: np.ndarray):
    """Yield ``(prob, users, items)`` for every recommendation with positive probability."""
    n_users, n_items = world.shape
    if world.layout == "global":
        for u, i in zip(*np.nonzero(table > 0)):
            yield float(table[u, i]), np.array([u]), np.array([i])
    else:
        per_user = [np.flatnonzero(table[u] > 0) for u in range(n_users)]
        for combo in itertools.product(*per_user):
            prob = math.prod(float(table[u, i]) for u, i in enumerate(combo))
            yield prob, np.arange(n_users), np.array(combo)


def _rating_options(world: TinyWorld, users, items):
    supports = [np.flatnonzero(world.rating_probs[u, i] > 0) for u, i in zip(users, items)]
    for combo in itertools.product(*supports):
        prob = math.prod(float(world.rating_probs[u, i, k]) for u, i, k in zip(users, items, combo))
        yield prob, world.rating_values[list(combo)]


def enumerate_trajectories(
    world: TinyWorld, policy: Policy, t: int
) -> Iterator[tuple[float, InteractionHistory]]:
    """Every length-``t`` trajectory with its exact probability.

    Each step logs the full propensity table, so every weight scheme
    (including the general CAFL weights) can be evaluated on the leaves.
    """
    world.check_limits(t)

    def rec(prob: float, history: InteractionHistory):
        if history.horizon == t:
            yield prob, history
            return
        s = history.horizon + 1
        table = policy(history)
        for p_a, users, items in _step_options(world, table):
            a = RecommendationMatrix.from_pairs(world.shape, users, items, s)
            log = PropensityLog(s, users, items, table[users, items], table=table)
            for p_r, values in _rating_options(world, users, items):
                r = np.zeros(world.shape)
                r[users, items] = values
                nxt = record_step(history, a, RatingMatrix(r, s), log)
                yield from rec(prob * p_a * p_r, nxt)

    yield from rec(1.0, world.empty_history())


def exact_causal_objective(world: TinyWorld, params: LatentParams, t: int) -> float:
    """Feedback-free objective by brute force over (step, pair, rating value)."""
    world.check_limits(t)
    terms = []
    n_users, n_items = world.shape
    for _s in range(1, t + 1):
        for u in range(n_users):
            for i in range(n_items):
                for k, v in enumerate(world.rating_values):
                    p = world.rating_probs[u, i, k]
                    if p > 0:
                        terms.append(p * float(gaussian_loglik(params, [u], [i], [v])[0]))
    return math.fsum(terms)


Estimator = Union[str, Callable[[InteractionHistory], WeightAssignment]]


def _weigh(estimator: Estimator, history: InteractionHistory, **kwargs) -> WeightAssignment:
    if callable(estimator):
        return estimator(history)
    return weights_for(estimator, history, **kwargs)


def expected_estimator_value(
    estimator: Estimator,
    world: TinyWorld,
    policy: Policy,
    params: LatentParams,
    t: int,
    **kwargs,
) -> float:
    """Exact ``E[sum_obs w * log P_params(R)]`` over all trajectories.

    ``estimator`` is a scheme name understood by
    :func:`recloop.estimators.weights_for` (extra keyword arguments are
    forwarded) or a callable ``history -> WeightAssignment``.
    """
    terms = []
    for prob, history in enumerate_trajectories(world, policy, t):
        obs = history.observations
        wa = _weigh(estimator, history, **kwargs)
        ll = gaussian_loglik(params, obs["u"], obs["i"], obs["r"])
        terms.append(prob * wa.objective(ll))
    return math.fsum(terms)


def expected_step_weights(
    estimator: Estimator, world: TinyWorld, policy: Policy, t: int, **kwargs
) -> np.ndarray:
    """Exact expected total weight carried by the observations of each step."""
    acc = [[] for _ in range(t)]
    for prob, history in enumerate_trajectories(world, policy, t):
        wa = _weigh(estimator, history, **kwargs)
        for s in range(1, t + 1):
            acc[s - 1].append(prob * float(wa.weights[wa.steps == s].sum()))
    return np.array([math.fsum(a) for a in acc])
