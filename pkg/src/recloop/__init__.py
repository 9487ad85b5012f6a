"""Multi-step recommender simulation with causal (CAFL) loss reweighting."""
from .core import (
    HistoryError,
    InteractionHistory,
    LatentParams,
    PropensityLog,
    RatingMatrix,
    RecommendationMatrix,
    SeededRng,
    consumed_pairs,
    load_history,
    record_step,
    rng_stream,
    save_history,
)
from .environments import (
    BetaPrimeSpec,
    DirichletEnv,
    LatentFactorEnv,
    UserExhaustedError,
    VarianceTooLargeError,
    beta_prime_params,
    exposure_probs_pan,
    make_dirichlet_env,
    make_latent_env,
    rate_step,
)
from .estimators import (
    PositivityError,
    WeightAssignment,
    cafl_general_weights,
    cafl_special_weights,
    compute_c,
    ipw_weights,
    naive_weights,
    popularity_weights,
    weights_for,
)
from .recommenders import (
    MFConfig,
    Policy,
    WeightedALS,
    WeightedMFSGD,
    fit_weighted_als,
    fit_weighted_sgd,
    policy_probs,
    recommend,
)
from .metrics import TestSet, homogenization, jaccard, mean_ndcg, ndcg_at_k, rmse, mse_mae

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
