"""Ground-truth rating environments.

Two worlds are provided:

* :class:`DirichletEnv` -- users and items on the K-simplex, ratings drawn
  from a mean-parameterized Beta, plus a fixed item-item similarity matrix
  that drives the history-dependent exposure process of
  :func:`exposure_probs_pan`.
* :class:`LatentFactorEnv` -- a Gaussian bilinear model with ratings clipped
  to a fixed range.

Both are immutable once built; only the caller's generator advances.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import InteractionHistory, RatingMatrix, RecommendationMatrix, rng_stream

__all__ = [
    "VarianceTooLargeError",
    "UserExhaustedError",
    "BetaPrimeSpec",
    "beta_prime_params",
    "DirichletEnv",
    "LatentFactorEnv",
    "make_dirichlet_env",
    "make_latent_env",
    "sample_rating_dirichlet",
    "sample_rating_latent",
    "score_pan",
    "exposure_probs_pan",
    "exposure_table_pan",
    "rate_step",
    "default_top_k",
]


class VarianceTooLargeError(ValueError):
    pass


class UserExhaustedError(RuntimeError):
    pass


def beta_prime_params(mu: float, sigma2: float, moment_exact: bool = False) -> tuple[float, float]:
    """Shape parameters of the mean-parameterized Beta.

    The default uses ``a = ((1 - mu)/sigma2 - 1/mu) * mu`` and
    ``b = a * (1/mu - 1)``. The resulting Beta has mean ``mu`` but variance
    ``mu(1-mu)/(a+b+1)``, which is not ``sigma2``. With ``moment_exact=True``
    the method-of-moments parameters are used instead, which match both mean
    and variance.

    Examples
    --------
    >>> beta_prime_params(0.5, 0.01)
    (24.0, 24.0)
    """
    if not 0.0 < mu < 1.0:
        raise ValueError(f"mean must lie in (0, 1), got {mu}")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if moment_exact:
        k = mu * (1.0 - mu) / sigma2 - 1.0
        a, b = mu * k, (1.0 - mu) * k
    else:
        a = ((1.0 - mu) / sigma2 - 1.0 / mu) * mu
        b = a * (1.0 / mu - 1.0)
    if a <= 0 or b <= 0:
        raise VarianceTooLargeError(f"variance too large for mean: mu={mu}, sigma2={sigma2}")
    return a, b


def _beta_shapes(mu: np.ndarray, sigma2: float, moment_exact: bool) -> tuple[np.ndarray, np.ndarray]:
    mu = np.asarray(mu, dtype=float)
    if moment_exact:
        k = mu * (1.0 - mu) / sigma2 - 1.0
        a, b = mu * k, (1.0 - mu) * k
    else:
        a = ((1.0 - mu) / sigma2 - 1.0 / mu) * mu
        b = a * (1.0 / mu - 1.0)
    if (a <= 0).any() or (b <= 0).any():
        raise VarianceTooLargeError("variance too large for mean")
    return a, b


@dataclass(frozen=True)
class BetaPrimeSpec:
    """Variance and parameterization of the mean-parameterized Beta.

    ``min_shape`` bounds the smaller shape parameter from below by clipping
    the mean into ``[mu_lo, 1 - mu_lo]``; it keeps draws away from the
    reserved rating 0.
    """

    sigma2: float = 0.01
    moment_exact: bool = False
    min_shape: float = 1.0

    def mean_bounds(self) -> tuple[float, float]:
        """Means whose smaller Beta shape parameter is at least ``min_shape``."""
        if self.moment_exact:
            lo, hi = 1e-12, 0.5
            if hi * (hi * (1 - hi) / self.sigma2 - 1) < self.min_shape:
                raise VarianceTooLargeError("sigma2 too large for any mean")
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if mid * (mid * (1 - mid) / self.sigma2 - 1) >= self.min_shape:
                    hi = mid
                else:
                    lo = mid
            m = hi
        else:
            # literal form: a = mu(1 - mu)/sigma2 - 1, and a <= b for mu <= 1/2
            target = self.sigma2 * (1.0 + self.min_shape)
            if target > 0.25:
                raise VarianceTooLargeError("sigma2 too large for any mean")
            m = 0.5 * (1.0 - math.sqrt(1.0 - 4.0 * target))
        return m, 1.0 - m

    def clip_mean(self, mu):
        lo, hi = self.mean_bounds()
        return np.clip(mu, lo, hi)

    def sample(self, mu, rng: np.random.Generator) -> np.ndarray:
        a, b = _beta_shapes(self.clip_mean(mu), self.sigma2, self.moment_exact)
        x = rng.beta(a, b)
        # keep strictly inside (0, 1): 0 is the "unobserved" code
        return np.clip(x, 1e-12, 1.0 - 1e-12)


def default_top_k(n_items: int) -> int:
    return 100 if n_items >= 1000 else max(1, math.ceil(0.1 * n_items))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DirichletEnv:
    """Simplex-valued users/items with Beta ratings and an item similarity matrix."""

    user_vectors: np.ndarray
    item_vectors: np.ndarray
    similarity: np.ndarray
    mu_theta: np.ndarray
    mu_beta: np.ndarray
    beta_spec: BetaPrimeSpec = BetaPrimeSpec()
    top_k: Optional[int] = None
    boost: float = 10.0

    def __post_init__(self):
        for name in ("user_vectors", "item_vectors", "similarity", "mu_theta", "mu_beta"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        for name in ("user_vectors", "item_vectors"):
            v = getattr(self, name)
            if (v < 0).any() or not np.allclose(v.sum(axis=1), 1.0):
                raise ValueError(f"{name} rows must lie on the simplex")
        if self.top_k is None:
            object.__setattr__(self, "top_k", default_top_k(self.n_items))

    @property
    def n_users(self) -> int:
        return self.user_vectors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_vectors.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_users, self.n_items)

    def expected(self, users, items) -> np.ndarray:
        """Mean rating ``theta_u . beta_i`` after clipping into the valid range."""
        u = np.asarray(users, dtype=int)
        i = np.asarray(items, dtype=int)
        mu = np.einsum("nk,nk->n", self.user_vectors[u], self.item_vectors[i])
        return self.beta_spec.clip_mean(mu)

    def sample(self, users, items, rng: np.random.Generator) -> np.ndarray:
        u = np.asarray(users, dtype=int)
        i = np.asarray(items, dtype=int)
        mu = np.einsum("nk,nk->n", self.user_vectors[u], self.item_vectors[i])
        return self.beta_spec.sample(mu, rng)

    def checksum(self) -> int:
        return zlib.crc32(
            self.user_vectors.tobytes() + self.item_vectors.tobytes() + self.similarity.tobytes()
        )


def make_dirichlet_env(
    n_users: int,
    n_items: int,
    n_factors: int = 10,
    *,
    sigma2: float = 0.01,
    moment_exact: bool = False,
    user_concentration: float = 20.0,
    item_concentration: float = 100.0,
    user_scale: float = 1.0,
    item_scale: float = 1.0,
    top_k: Optional[int] = None,
    seed: int = 0,
) -> DirichletEnv:
    """Sample a :class:`DirichletEnv`.

    ``mu_theta ~ Dir(user_concentration * 1_K)``, ``theta_u ~ Dir(user_scale * mu_theta)``
    and likewise for items; ``S_ij`` is one mean-parameterized Beta draw with
    mean ``beta_i . beta_j``.
    """
    rng = rng_stream(seed, "dirichlet-env")
    spec = BetaPrimeSpec(sigma2=sigma2, moment_exact=moment_exact)
    mu_theta = rng.dirichlet(np.full(n_factors, float(user_concentration)))
    mu_beta = rng.dirichlet(np.full(n_factors, float(item_concentration)))
    theta = rng.dirichlet(user_scale * mu_theta, size=n_users)
    beta = rng.dirichlet(item_scale * mu_beta, size=n_items)
    sim = spec.sample(beta @ beta.T, rng)
    return DirichletEnv(theta, beta, sim, mu_theta, mu_beta, spec, top_k)


@dataclass(frozen=True)
class LatentFactorEnv:
    """Gaussian bilinear ratings ``clip(theta_u . beta_i + eps, lo, hi)``."""

    params_user: np.ndarray
    params_item: np.ndarray
    noise_variance: float = 0.25
    clip: tuple = (1.0, 5.0)

    def __post_init__(self):
        object.__setattr__(self, "params_user", _frozen(self.params_user))
        object.__setattr__(self, "params_item", _frozen(self.params_item))
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        lo, hi = self.clip
        if not lo < hi:
            raise ValueError("clip range must satisfy lo < hi")
        if lo <= 0 <= hi:
            raise ValueError("clip range must exclude 0 (reserved for 'not observed')")

    @property
    def n_users(self) -> int:
        return self.params_user.shape[0]

    @property
    def n_items(self) -> int:
        return self.params_item.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_users, self.n_items)

    def mean_matrix(self) -> np.ndarray:
        return self.params_user @ self.params_item.T

    def expected(self, users, items) -> np.ndarray:
        u = np.asarray(users, dtype=int)
        i = np.asarray(items, dtype=int)
        mu = np.einsum("nk,nk->n", self.params_user[u], self.params_item[i])
        return np.clip(mu, *self.clip)

    def sample(self, users, items, rng: np.random.Generator) -> np.ndarray:
        u = np.asarray(users, dtype=int)
        i = np.asarray(items, dtype=int)
        mu = np.einsum("nk,nk->n", self.params_user[u], self.params_item[i])
        noise = rng.normal(0.0, math.sqrt(self.noise_variance), size=mu.shape)
        return np.clip(mu + noise, *self.clip)

    def checksum(self) -> int:
        return zlib.crc32(self.params_user.tobytes() + self.params_item.tobytes())


def make_latent_env(
    n_users: int,
    n_items: int,
    n_factors: int = 8,
    *,
    noise_variance: float = 0.25,
    clip: tuple = (1.0, 5.0),
    spread: float = 0.6,
    decay: float = 0.0,
    item_bias_sd: float = 0.0,
    seed: int = 0,
    max_tries: int = 100,
) -> LatentFactorEnv:
    """Sample a :class:`LatentFactorEnv` whose mean ratings sit inside ``clip``.

    The first latent coordinate carries the offset: ``theta_u0 = 1`` and
    ``beta_i0 = mid + b_i`` with item bias ``b_i ~ N(0, item_bias_sd^2)``.
    For the other coordinates ``theta_uk ~ N(0, 1)`` and
    ``beta_ik ~ N(0, v_k)`` with ``v_k`` proportional to ``k^-decay`` and
    summing to ``spread^2``, so the interaction part has standard deviation
    ``spread``. Draws are repeated until at least 99% of the means are in range.
    """
    if n_factors < 2:
        raise ValueError("n_factors must be >= 2 (one coordinate holds the offset)")
    if spread < 0 or decay < 0 or item_bias_sd < 0:
        raise ValueError("spread, decay and item_bias_sd must be non-negative")
    rng = rng_stream(seed, "latent-env")
    lo, hi = clip
    mid = 0.5 * (lo + hi)
    v = np.arange(1, n_factors, dtype=float) ** -decay
    item_sd = np.sqrt(v / v.sum()) * spread
    for _ in range(max_tries):
        theta = np.empty((n_users, n_factors))
        beta = np.empty((n_items, n_factors))
        theta[:, 0] = 1.0
        theta[:, 1:] = rng.normal(size=(n_users, n_factors - 1))
        beta[:, 0] = mid + rng.normal(0.0, item_bias_sd, size=n_items)
        beta[:, 1:] = rng.normal(size=(n_items, n_factors - 1)) * item_sd
        mean = theta @ beta.T
        if ((mean >= lo) & (mean <= hi)).mean() >= 0.99:
            return LatentFactorEnv(theta, beta, noise_variance, tuple(clip))
    raise RuntimeError("could not place 99% of mean ratings inside the clip range")


def sample_rating_dirichlet(env: DirichletEnv, u: int, i: int, rng: np.random.Generator) -> float:
    return float(env.sample([u], [i], rng)[0])


def sample_rating_latent(env: LatentFactorEnv, u: int, i: int, rng: np.random.Generator) -> float:
    return float(env.sample([u], [i], rng)[0])


def rate_step(env, rec: RecommendationMatrix, rng: np.random.Generator) -> RatingMatrix:
    """Ratings for every recommended pair (row-major order), zero elsewhere."""
    if rec.shape != env.shape:
        raise ValueError("recommendation matrix does not match the environment")
    users, items = rec.pairs()
    r = np.zeros(rec.shape)
    if len(users):
        r[users, items] = env.sample(users, items, rng)
    return RatingMatrix(r, rec.timestep)


# ---------------------------------------------------------------------------
# exposure process
# ---------------------------------------------------------------------------


def _summed_ratings(history: InteractionHistory, upto: Optional[int] = None) -> np.ndarray:
    acc = np.zeros(history.shape)
    for st in history.steps[:upto]:
        np.add.at(acc, (st.users, st.items), st.ratings)
    return acc


def score_table_pan(env: DirichletEnv, history: InteractionHistory) -> np.ndarray:
    """U x I scores ``sum_{s<t} sum_j A_{s,uj} R_{s,uj} exp(S_ij)``."""
    return _summed_ratings(history) @ np.exp(env.similarity).T


def score_pan(env: DirichletEnv, history: InteractionHistory, u: int, i: int) -> float:
    past = _summed_ratings(history)[u]
    return float(past @ np.exp(env.similarity[i]))


def _exposure_rows(scores: np.ndarray, blocked: np.ndarray, top_k: int, boost: float) -> np.ndarray:
    n_users, n_items = scores.shape
    w = np.ones((n_users, n_items))
    for u in range(n_users):
        feasible = np.flatnonzero(~blocked[u])
        if feasible.size == 0:
            raise UserExhaustedError(f"user {u} has no unconsumed items")
        # descending score, ties by ascending item index
        order = feasible[np.lexsort((feasible, -scores[u, feasible]))]
        w[u, order[:top_k]] = boost
    w[blocked] = 0.0
    return w / w.sum(axis=1, keepdims=True)


def exposure_table_pan(
    env: DirichletEnv, history: InteractionHistory, exclude: Optional[np.ndarray] = None
) -> np.ndarray:
    """Exposure probabilities for every user at step ``history.horizon + 1``.

    The unnormalized weight is 0 for consumed (or excluded) items,
    ``env.boost`` for the ``top_k`` highest-scoring unconsumed items and 1 for
    the rest. With an empty history every score is 0, so the tie rule boosts
    the lowest-indexed items.
    """
    blocked = history.consumed.copy()
    if exclude is not None:
        blocked |= exclude
    scores = score_table_pan(env, history)
    return _exposure_rows(scores, blocked, env.top_k, env.boost)


def exposure_probs_pan(
    env: DirichletEnv, history: InteractionHistory, u: int, exclude: Optional[np.ndarray] = None
) -> np.ndarray:
    blocked = history.consumed[u : u + 1].copy()
    if exclude is not None:
        blocked |= exclude[u : u + 1]
    scores = _summed_ratings(history)[u : u + 1] @ np.exp(env.similarity).T
    return _exposure_rows(scores, blocked, env.top_k, env.boost)[0]
