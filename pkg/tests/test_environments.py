import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recloop.core import InteractionHistory, RecommendationMatrix, history_from_arrays, rng_stream
from recloop.environments import (
    BetaPrimeSpec,
    DirichletEnv,
    UserExhaustedError,
    VarianceTooLargeError,
    beta_prime_params,
    default_top_k,
    exposure_probs_pan,
    exposure_table_pan,
    make_dirichlet_env,
    make_latent_env,
    rate_step,
    sample_rating_dirichlet,
    sample_rating_latent,
    score_pan,
    score_table_pan,
)


def flat_env(n_items=10, top_k=2, n_users=1):
    """Dirichlet env with identical items, so all similarities are equal."""
    k = 3
    items = np.full((n_items, k), 1.0 / k)
    users = np.full((n_users, k), 1.0 / k)
    sim = np.full((n_items, n_items), 0.5)
    return DirichletEnv(users, items, sim, np.full(k, 1 / k), np.full(k, 1 / k), BetaPrimeSpec(), top_k)


@pytest.mark.parametrize("mu, expected", [(0.5, (24.0, 24.0)), (0.2, (15.0, 60.0))])
def test_beta_prime_literal_examples(mu, expected):
    a, b = beta_prime_params(mu, 0.01)
    assert a == pytest.approx(expected[0], abs=1e-9)
    assert b == pytest.approx(expected[1], abs=1e-9)
    assert a / (a + b) == pytest.approx(mu, abs=1e-12)


def test_beta_prime_variance_too_large():
    with pytest.raises(VarianceTooLargeError, match="variance too large"):
        beta_prime_params(0.5, 0.5)


def test_literal_beta_variance_differs_from_sigma2():
    a, b = beta_prime_params(0.5, 0.01)
    var = a * b / ((a + b) ** 2 * (a + b + 1))
    assert var == pytest.approx(0.25 / 49, rel=1e-12)
    assert abs(var - 0.01) > 1e-3


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(1e-4, 0.02), st.booleans())
def test_beta_prime_mean_is_exact(mu, sigma2, moment_exact):
    a, b = beta_prime_params(mu, sigma2, moment_exact)
    assert a / (a + b) == pytest.approx(mu, abs=1e-12)
    if moment_exact:
        var = a * b / ((a + b) ** 2 * (a + b + 1))
        assert abs(var - sigma2) < 1e-12


def test_dirichlet_env_simplex_and_fixed_similarity():
    env = make_dirichlet_env(20, 30, 5, seed=1)
    np.testing.assert_allclose(env.user_vectors.sum(axis=1), 1.0)
    np.testing.assert_allclose(env.item_vectors.sum(axis=1), 1.0)
    assert ((env.similarity > 0) & (env.similarity < 1)).all()
    assert env.checksum() == make_dirichlet_env(20, 30, 5, seed=1).checksum()
    assert env.checksum() != make_dirichlet_env(20, 30, 5, seed=2).checksum()
    with pytest.raises(ValueError):
        env.similarity[0, 0] = 0.3


def test_dirichlet_rating_monte_carlo_mean_and_support():
    env = make_dirichlet_env(5, 5, 4, seed=3)
    rng = rng_stream(0, "mc")
    draws = env.sample(np.full(100_000, 2), np.full(100_000, 3), rng)
    mu = float(env.expected([2], [3])[0])
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(draws.mean() - mu) < 3 * se
    assert ((draws > 0) & (draws < 1)).all()


def test_dirichlet_sampling_is_deterministic():
    env = make_dirichlet_env(4, 4, 3, seed=0)
    x = sample_rating_dirichlet(env, 1, 2, rng_stream(5, "r"))
    y = sample_rating_dirichlet(env, 1, 2, rng_stream(5, "r"))
    assert x == y


def test_latent_env_ranges_and_monte_carlo():
    env = make_latent_env(50, 60, 8, seed=2)
    mean = env.mean_matrix()
    assert ((mean >= 1) & (mean <= 5)).mean() >= 0.99
    u, i = np.unravel_index(np.argmin(np.abs(mean - 3.0)), mean.shape)
    rng = rng_stream(1, "mc")
    draws = env.sample(np.full(100_000, u), np.full(100_000, i), rng)
    assert ((draws >= 1) & (draws <= 5)).all()
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    # the pair sits near the middle, so clipping barely moves the mean
    assert abs(draws.mean() - mean[u, i]) < 3 * se


def test_latent_env_noiseless_is_clipped_mean():
    env = make_latent_env(10, 10, 4, noise_variance=1e-300, seed=4)
    rng = rng_stream(0, "x")
    for u, i in [(0, 0), (3, 7), (9, 9)]:
        assert sample_rating_latent(env, u, i, rng) == pytest.approx(np.clip(env.mean_matrix()[u, i], 1, 5))


def test_latent_env_options():
    env = make_latent_env(30, 40, 16, decay=1.0, item_bias_sd=0.3, seed=0)
    assert env.mean_matrix().shape == (30, 40)
    with pytest.raises(ValueError):
        make_latent_env(3, 3, 1)


def test_rate_step_only_rates_recommended_pairs():
    env = make_latent_env(3, 4, 3, seed=0)
    zero = RecommendationMatrix(np.zeros((3, 4), dtype=int), 1)
    assert (rate_step(env, zero, rng_stream(0)).entries == 0).all()
    one = RecommendationMatrix.from_pairs((3, 4), [1], [2], 1)
    r = rate_step(env, one, rng_stream(0)).entries
    assert np.count_nonzero(r) == 1 and r[1, 2] != 0
    again = rate_step(env, one, rng_stream(0)).entries
    np.testing.assert_array_equal(r, again)


def test_exposure_equal_scores_boosts_top_k():
    env = flat_env(10, 2)
    p = exposure_probs_pan(env, InteractionHistory(1, 10), 0)
    np.testing.assert_allclose(p[:2], 10 / 28)
    np.testing.assert_allclose(p[2:], 1 / 28)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_exposure_consumed_item_gets_zero():
    env = make_dirichlet_env(3, 12, 3, seed=0)
    h = history_from_arrays((3, 12), [([0, 1, 2], [4, 5, 6], [0.3, 0.6, 0.2], [1 / 12] * 3)])
    table = exposure_table_pan(env, h)
    assert table[0, 4] == 0 and table[1, 5] == 0 and table[2, 6] == 0
    np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(exposure_probs_pan(env, h, 1), table[1])


def test_exposure_exhaustion():
    env = flat_env(2, 1)
    h = history_from_arrays((1, 2), [([0], [0], [0.5], [0.5]), ([0], [1], [0.5], [1.0])])
    with pytest.raises(UserExhaustedError):
        exposure_probs_pan(env, h, 0)


def test_score_pan_examples():
    env = make_dirichlet_env(2, 6, 3, seed=5)
    empty = InteractionHistory(2, 6)
    assert (score_table_pan(env, empty) == 0).all()
    h = history_from_arrays((2, 6), [([0, 1], [2, 3], [0.4, 0.7], [1 / 6, 1 / 6])])
    for i in range(6):
        assert score_pan(env, h, 0, i) == pytest.approx(0.4 * math.exp(env.similarity[i, 2]))
    h2 = history_from_arrays((2, 6), [([0, 1], [2, 3], [0.8, 1.4], [1 / 6, 1 / 6])])
    np.testing.assert_allclose(score_table_pan(env, h2), 2 * score_table_pan(env, h))


def test_exposure_ranking_follows_scores():
    env = make_dirichlet_env(1, 20, 3, top_k=3, seed=6)
    h = history_from_arrays((1, 20), [([0], [7], [0.9], [0.05])])
    p = exposure_probs_pan(env, h, 0)
    scores = score_table_pan(env, h)[0]
    scores[7] = -np.inf
    top = np.argsort(-scores, kind="stable")[:3]
    assert set(np.flatnonzero(p == p.max())) == set(top)


def test_default_top_k():
    assert default_top_k(1000) == 100
    assert default_top_k(100) == 10
    assert default_top_k(5) == 1
