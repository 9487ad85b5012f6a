"""Experiment orchestration: the multi-step recommend/rate/retrain loop,
paired arms, replications, the exposure benchmark and CSV output.

Every replication ``r`` draws from streams keyed by ``base_seed + r`` and is
self-contained, so replications can run in any order or in parallel and the
output is still bit-identical.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import yaml
from scipy import stats

from .core import InteractionHistory, LatentParams, SeededRng, record_step
from .environments import (
    DirichletEnv,
    UserExhaustedError,
    make_dirichlet_env,
    make_latent_env,
    rate_step,
)
from .estimators import dumps_weights, weights_for
from .metrics import TestSet, feedback_effect, homogenization_matrix, mean_ndcg, mse_mae
from .recommenders import (
    MFConfig,
    Policy,
    fit_weighted_als,
    fit_weighted_sgd,
    recommend,
    sample_from_table,
    table_from_feasible,
)

__all__ = [
    "ARMS",
    "METRICS",
    "ARM_METRICS",
    "EnvConfig",
    "ExperimentConfig",
    "PanConfig",
    "MetricSeries",
    "ExperimentReport",
    "PanResult",
    "make_environment",
    "run_arm",
    "run_experiment",
    "run_pan_benchmark",
    "paired_test",
    "ci_halfwidth",
    "write_csv",
    "write_pan_csv",
    "load_config",
    "load_pan_config",
    "dump_final_weights",
]

log = logging.getLogger(__name__)

ARMS = ("feedback", "cafl", "uniform", "random_shadow")
ARM_METRICS = ("rmse", "mse", "mae", "ndcg", "jaccard", "rec_rating")
METRICS = ARM_METRICS + ("feedback_effect",)
PAN_SCHEMES = ("naive", "popularity", "cafl")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "latent"
    n_users: int = 100
    n_items: int = 100
    n_factors: Optional[int] = None  # 64 for latent, 10 for dirichlet
    sigma2: Optional[float] = None  # noise variance (latent) or Beta variance (dirichlet)
    clip: tuple = (1.0, 5.0)
    concentrations: tuple = (20.0, 100.0)
    scales: tuple = (1.0, 1.0)
    moment_exact: bool = False
    top_k: Optional[int] = None
    spread: float = 0.6
    decay: float = 0.0
    item_bias_sd: float = 0.0

    def __post_init__(self):
        if self.kind not in ("latent", "dirichlet"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.n_factors is None:
            object.__setattr__(self, "n_factors", 64 if self.kind == "latent" else 10)
        if min(self.n_users, self.n_items, self.n_factors) < 1:
            raise ValueError("U, I and K must be positive")
        object.__setattr__(self, "clip", tuple(float(c) for c in self.clip))
        object.__setattr__(self, "concentrations", tuple(float(c) for c in self.concentrations))
        object.__setattr__(self, "scales", tuple(float(c) for c in self.scales))


def make_environment(cfg: EnvConfig, seed: int):
    if cfg.kind == "latent":
        noise = 0.25 if cfg.sigma2 is None else cfg.sigma2
        return make_latent_env(
            cfg.n_users, cfg.n_items, cfg.n_factors, noise_variance=noise, clip=cfg.clip,
            spread=cfg.spread, decay=cfg.decay, item_bias_sd=cfg.item_bias_sd, seed=seed,
        )
    return make_dirichlet_env(
        cfg.n_users,
        cfg.n_items,
        cfg.n_factors,
        sigma2=0.01 if cfg.sigma2 is None else cfg.sigma2,
        moment_exact=cfg.moment_exact,
        user_concentration=cfg.concentrations[0],
        item_concentration=cfg.concentrations[1],
        user_scale=cfg.scales[0],
        item_scale=cfg.scales[1],
        top_k=cfg.top_k,
        seed=seed,
    )


def _desk_model() -> MFConfig:
    # deliberately lower rank than the default latent environment
    return MFConfig(n_factors=8, reg=1.0)


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: MFConfig = field(default_factory=lambda: _desk_model())
    trainer: str = "als"
    policy: Policy = field(default_factory=Policy)
    estimator: str = "cafl"
    horizon: int = 50
    retrain_every: int = 1
    test_size: int = 1000
    replications: int = 10
    seed: int = 0
    arms: tuple = ARMS
    warm_start: bool = False
    ci: str = "normal"
    n_jobs: int = 1
    out: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        bad = [a for a in self.arms if a not in ARMS]
        if bad or not self.arms:
            raise ValueError(f"unknown arms {bad}; choose from {ARMS}")
        if len(set(self.arms)) != len(self.arms):
            raise ValueError("duplicate arms")
        if self.trainer not in ("als", "sgd"):
            raise ValueError("trainer must be 'als' or 'sgd'")
        if self.estimator not in ("naive", "ipw", "cafl", "cafl_special", "cafl_general"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.horizon < 1 or self.retrain_every < 1 or self.replications < 1 or self.test_size < 1:
            raise ValueError("horizon, retrain_every, replications and test_size must be positive")
        if self.ci not in ("normal", "t"):
            raise ValueError("ci must be 'normal' or 't'")
        u, i = self.env.n_users, self.env.n_items
        if self.policy.no_repeat and self.horizon * self.policy.n * u + self.test_size > u * i:
            raise ValueError(
                f"T*N*U + test size = {self.horizon * self.policy.n * u + self.test_size} "
                f"exceeds U*I = {u * i} in no-repeat mode"
            )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class PanConfig:
    env: EnvConfig = field(
        default_factory=lambda: EnvConfig(kind="dirichlet", n_users=300, n_items=100, n_factors=10)
    )
    model: MFConfig = field(default_factory=lambda: MFConfig(n_factors=4, reg=0.0))
    steps: int = 20
    train_steps: int = 20
    test_per_user: int = 20
    schemes: tuple = PAN_SCHEMES
    replications: int = 10
    seed: int = 0
    ci: str = "normal"
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if self.env.kind != "dirichlet":
            raise ValueError("the exposure benchmark needs a dirichlet environment")
        bad = [s for s in self.schemes if s not in PAN_SCHEMES]
        if bad or not self.schemes:
            raise ValueError(f"unknown schemes {bad}; choose from {PAN_SCHEMES}")
        if not 1 <= self.train_steps <= self.steps:
            raise ValueError("need 1 <= train_steps <= steps")
        if self.steps + self.test_per_user > self.env.n_items:
            raise ValueError("steps + test_per_user exceeds the number of items")
        if self.replications < 1 or self.test_per_user < 1:
            raise ValueError("replications and test_per_user must be positive")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_ENV_KEYS = {
    "kind": "kind", "U": "n_users", "I": "n_items", "K": "n_factors", "sigma2": "sigma2",
    "clip": "clip", "concentrations": "concentrations", "scales": "scales",
    "moment_exact": "moment_exact", "top_k": "top_k", "spread": "spread", "decay": "decay",
    "item_bias_sd": "item_bias_sd",
}
_MODEL_KEYS = {
    "K": "n_factors", "lambda": "reg", "sweeps": "als_sweeps", "epochs": "epochs", "lr": "lr",
    "batch_size": "batch_size", "init_scale": "init_scale", "normalize_weights": "normalize_weights",
}
_POLICY_KEYS = {"policy": "kind", "epsilon": "epsilon", "tau": "tau", "N": "n"}
_EXPERIMENT_KEYS = {
    "T": "horizon", "retrain_every": "retrain_every", "test_size": "test_size",
    "replications": "replications", "seed": "seed", "arms": "arms", "warm_start": "warm_start",
    "ci": "ci", "n_jobs": "n_jobs", "out": "out",
}
_PAN_KEYS = {
    "steps": "steps", "train_steps": "train_steps", "test_per_user": "test_per_user",
    "schemes": "schemes", "replications": "replications", "seed": "seed", "ci": "ci", "n_jobs": "n_jobs",
}


def _translate(section: Optional[Mapping], keys: Mapping[str, str], name: str) -> dict:
    section = section or {}
    if not isinstance(section, Mapping):
        raise ValueError(f"section [{name}] must be a mapping")
    unknown = sorted(set(section) - set(keys))
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {', '.join(map(str, unknown))}")
    return {keys[k]: v for k, v in section.items()}


def _read_yaml(source) -> dict:
    if isinstance(source, Mapping):
        return dict(source)
    text = Path(source).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    if not isinstance(data, Mapping):
        raise ValueError("config file must hold a mapping of sections")
    return dict(data)


def _model_config(raw: dict, defaults: MFConfig) -> tuple[MFConfig, Optional[str], dict]:
    section = dict(raw.get("model") or {})
    trainer = section.pop("model", None)
    policy_part = {k: section.pop(k) for k in list(section) if k in _POLICY_KEYS}
    cfg = dataclasses.replace(defaults, **_translate(section, _MODEL_KEYS, "model"))
    return cfg, trainer, policy_part


def load_config(source) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a YAML file (or a mapping).

    Sections: ``environment``, ``model`` (``model``, ``K``, ``lambda``,
    ``sweeps``, ``epochs``, ``lr``), ``policy`` (``policy``, ``epsilon``,
    ``tau``, ``N``; these may also sit in ``model``), ``experiment`` and a
    top-level ``estimator`` key.
    """
    raw = _read_yaml(source)
    unknown = sorted(set(raw) - {"environment", "model", "policy", "experiment", "estimator", "pan"})
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(unknown)}")
    env = EnvConfig(**_translate(raw.get("environment"), _ENV_KEYS, "environment"))
    model, trainer, policy_part = _model_config(raw, _desk_model())
    policy_part.update(raw.get("policy") or {})
    policy = Policy(**_translate(policy_part, _POLICY_KEYS, "policy"))
    kw = _translate(raw.get("experiment"), _EXPERIMENT_KEYS, "experiment")
    if isinstance(kw.get("arms"), str):
        kw["arms"] = tuple(a.strip() for a in kw["arms"].split(",") if a.strip())
    return ExperimentConfig(
        env=env, model=model, trainer=trainer or "als", policy=policy,
        estimator=raw.get("estimator", "cafl"), **kw,
    )


def load_pan_config(source) -> PanConfig:
    """Build a :class:`PanConfig` from the ``environment``, ``model`` and ``pan`` sections."""
    raw = _read_yaml(source)
    base = PanConfig()
    env_kw = dataclasses.asdict(base.env)
    env_kw.update(_translate(raw.get("environment"), _ENV_KEYS, "environment"))
    env = EnvConfig(**env_kw)
    model, trainer, _ = _model_config(raw, base.model)
    if trainer not in (None, "sgd"):
        raise ValueError("the exposure benchmark trains with sgd")
    kw = _translate(raw.get("pan"), _PAN_KEYS, "pan")
    if isinstance(kw.get("schemes"), str):
        kw["schemes"] = tuple(s.strip() for s in kw["schemes"].split(",") if s.strip())
    return PanConfig(env=env, model=model, **kw)


# ---------------------------------------------------------------------------
# experiment loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricSeries:
    """Metric values of one arm in one replication; ``values[m][t-1]`` is step t."""

    arm: str
    replication: int
    values: Mapping[str, np.ndarray]
    env_checksum: int = 0
    history: Optional[InteractionHistory] = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class _Replication:
    env: Any
    test: TestSet
    test_mask: np.ndarray
    first_rec: Any
    first_log: Any
    first_ratings: Any


def _sample_test(cfg: ExperimentConfig, env, rng: np.random.Generator) -> TestSet:
    u, i = env.shape
    flat = rng.choice(u * i, size=cfg.test_size, replace=False)
    flat.sort()
    users, items = np.divmod(flat, i)
    per_user = np.bincount(users, minlength=u)
    if cfg.policy.no_repeat and (i - per_user < cfg.horizon * cfg.policy.n).any():
        raise UserExhaustedError("the test set leaves a user too few items for the horizon")
    ratings = env.sample(users, items, rng)
    return TestSet(users, items, ratings, (u, i))


@lru_cache(maxsize=8)
def _replication(cfg: ExperimentConfig, replication: int) -> _Replication:
    """Environment, test set and step-1 draws shared by all arms of a replication."""
    seed = cfg.seed + replication
    env = make_environment(cfg.env, seed)
    test = _sample_test(cfg, env, SeededRng(seed, ("test",)).generator())
    mask = test.mask()
    empty = InteractionHistory(*env.shape, n_per_step=cfg.policy.n, no_repeat=cfg.policy.no_repeat)
    rec, plog = recommend(
        Policy("uniform_random", n=cfg.policy.n, no_repeat=cfg.policy.no_repeat),
        None, empty, SeededRng(seed, ("step1",)).generator(), exclude=mask,
    )
    ratings = rate_step(env, rec, SeededRng(seed, ("step1", "ratings")).generator())
    return _Replication(env, test, mask, rec, plog, ratings)


def _weights(cfg: ExperimentConfig, arm: str, history: InteractionHistory, test_mask):
    if arm != "cafl":
        return weights_for("naive", history)
    if cfg.estimator == "cafl_general":
        return weights_for("cafl_general", history, exclude=test_mask)
    return weights_for(cfg.estimator, history)


def _fit(cfg: ExperimentConfig, history, weights, seed: int, previous: Optional[LatentParams]):
    fit = fit_weighted_als if cfg.trainer == "als" else fit_weighted_sgd
    return fit(history, weights, cfg.model, seed=seed, init=previous if cfg.warm_start else None)


def run_arm(cfg: ExperimentConfig, arm: str, replication: int = 0, keep_history: bool = False) -> MetricSeries:
    """Run one arm for ``cfg.horizon`` steps and evaluate after every step.

    ``feedback`` and ``cafl`` observe their own model-driven recommendations
    (naive and corrected weights). ``uniform`` and ``random_shadow`` observe
    uniformly random unconsumed pairs and are trained unweighted; they still
    compute model-driven "display" recommendations, which feed the
    ``jaccard`` and ``rec_rating`` metrics. All arms share the
    replication's environment, test set and step-1 draws.
    """
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    rep = _replication(cfg, replication)
    env, test = rep.env, rep.test
    seed = cfg.seed + replication
    arm_rng = SeededRng(seed, ("arm", arm))
    model_driven = arm in ("feedback", "cafl")
    random_policy = Policy("uniform_random", n=cfg.policy.n, no_repeat=cfg.policy.no_repeat)

    history = InteractionHistory(*env.shape, n_per_step=cfg.policy.n, no_repeat=cfg.policy.no_repeat)
    shown = np.zeros(env.shape, dtype=bool)
    params: Optional[LatentParams] = None
    out = {m: np.full(cfg.horizon, np.nan) for m in ARM_METRICS}

    for t in range(1, cfg.horizon + 1):
        if t == 1:
            rec, plog, ratings = rep.first_rec, rep.first_log, rep.first_ratings
        else:
            policy = cfg.policy if model_driven else random_policy
            rec, plog = recommend(policy, params, history, arm_rng.child("rec", t).generator(), rep.test_mask)
            ratings = rate_step(env, rec, arm_rng.child("ratings", t).generator())
        history = record_step(history, rec, ratings, plog, params)

        if model_driven or t == 1:
            display_u, display_i = rec.pairs()
        else:
            feasible = ~(shown | rep.test_mask) if cfg.policy.no_repeat else ~rep.test_mask
            table = table_from_feasible(cfg.policy, params, feasible)
            display_u, display_i, _ = sample_from_table(
                table, cfg.policy.n, arm_rng.child("display", t).generator()
            )
        shown[display_u, display_i] = True

        if (t - 1) % cfg.retrain_every == 0 or t == cfg.horizon or params is None:
            weights = _weights(cfg, arm, history, rep.test_mask)
            fit_seed = int(SeededRng(seed, ("fit", t)).generator().integers(2**63))
            params = _fit(cfg, history, weights, fit_seed, params)

        preds = np.einsum("nk,nk->n", params.user_vectors[test.users], params.item_vectors[test.items])
        mse, mae = mse_mae(preds, test.ratings)
        out["mse"][t - 1] = mse
        out["rmse"][t - 1] = math.sqrt(mse)
        out["mae"][t - 1] = mae
        out["ndcg"][t - 1] = mean_ndcg(params.user_vectors, params.item_vectors, test)
        out["jaccard"][t - 1] = homogenization_matrix(shown)
        out["rec_rating"][t - 1] = float(np.mean(env.expected(display_u, display_i)))

    for v in out.values():
        v.setflags(write=False)
    return MetricSeries(arm, replication, out, env.checksum(), history if keep_history else None)


def _with_feedback_effect(series: MetricSeries, shadow: MetricSeries) -> MetricSeries:
    effect = feedback_effect_series(series.values["rec_rating"], shadow.values["rec_rating"])
    effect.setflags(write=False)
    return dataclasses.replace(series, values={**series.values, "feedback_effect": effect})


def feedback_effect_series(actual: np.ndarray, shadow: np.ndarray) -> np.ndarray:
    return np.array([feedback_effect(a, b) for a, b in zip(actual, shadow)])


def _run_replication(cfg: ExperimentConfig, replication: int) -> list[MetricSeries]:
    series = [run_arm(cfg, arm, replication) for arm in cfg.arms]
    _replication.cache_clear()
    shadow = next((s for s in series if s.arm == "random_shadow"), None)
    if shadow is None:
        return series
    return [_with_feedback_effect(s, shadow) for s in series]


def ci_halfwidth(samples: np.ndarray, method: str = "normal", axis: int = 0) -> np.ndarray:
    """95% half-width of the mean: ``z * sd / sqrt(n)`` with z = 1.96 or the t quantile."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[axis]
    if n < 2:
        raise ValueError("a confidence interval needs at least two replications")
    z = 1.96 if method == "normal" else float(stats.t.ppf(0.975, n - 1))
    return z * np.std(x, axis=axis, ddof=1) / math.sqrt(n)


@dataclass(frozen=True)
class ExperimentReport:
    """Per-arm series for every replication plus means and CI half-widths by step."""

    config: Optional[ExperimentConfig]
    series: tuple

    @property
    def metrics(self) -> tuple:
        if not self.series:
            return ()
        return tuple(m for m in METRICS if m in self.series[0].values)

    @property
    def arms(self) -> tuple:
        seen = []
        for s in self.series:
            if s.arm not in seen:
                seen.append(s.arm)
        return tuple(seen)

    @property
    def replications(self) -> int:
        return len({s.replication for s in self.series})

    @property
    def horizon(self) -> int:
        return len(next(iter(self.series[0].values.values()))) if self.series else 0

    def stack(self, arm: str, metric: str) -> np.ndarray:
        """(replications x T) matrix of one metric for one arm."""
        rows = sorted((s for s in self.series if s.arm == arm), key=lambda s: s.replication)
        return np.vstack([s.values[metric] for s in rows])

    def final(self, arm: str, metric: str) -> np.ndarray:
        return self.stack(arm, metric)[:, -1]

    def mean(self, arm: str, metric: str) -> np.ndarray:
        return self.stack(arm, metric).mean(axis=0)

    def ci(self, arm: str, metric: str) -> Optional[np.ndarray]:
        if self.replications < 2:
            return None
        method = self.config.ci if self.config is not None else "normal"
        return ci_halfwidth(self.stack(arm, metric), method)

    def summary_rows(self):
        for arm in self.arms:
            for m in self.metrics:
                mean = self.mean(arm, m)
                half = self.ci(arm, m)
                for t in range(self.horizon):
                    row = [arm, t + 1, m, float(mean[t])]
                    if half is not None:
                        row.append(float(half[t]))
                    yield row

    def value_rows(self):
        order = {a: k for k, a in enumerate(self.arms)}
        for s in sorted(self.series, key=lambda s: (order[s.arm], s.replication)):
            for t in range(self.horizon):
                for m in self.metrics:
                    yield [s.arm, s.replication, t + 1, m, float(s.values[m][t])]


def _parallel(fn, cfg, count: int, n_jobs: int):
    if n_jobs == 1 or count == 1:
        return [fn(cfg, r) for r in range(count)]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(fn)(cfg, r) for r in range(count))


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None) -> ExperimentReport:
    """Run every configured arm in every replication; write CSVs when an output dir is set."""
    per_rep = _parallel(_run_replication, cfg, cfg.replications, cfg.n_jobs)
    report = ExperimentReport(cfg, tuple(s for rep in per_rep for s in rep))
    target = out if out is not None else cfg.out
    if target is not None:
        write_csv(report, target)
    return report


def paired_test(a, b, alternative: str = "less") -> float:
    """p-value of the paired t-test of ``mean(a - b)`` against 0 (one-sided by default)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("paired test needs two equal-length samples of size >= 2")
    if np.all(a == b):
        return 1.0
    return float(stats.ttest_rel(a, b, alternative=alternative).pvalue)


# ---------------------------------------------------------------------------
# exposure benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PanResult:
    """Per-replication MSE/MAE for each scheme, plus summary helpers."""

    config: PanConfig
    mse: Mapping[str, np.ndarray]
    mae: Mapping[str, np.ndarray]

    def table(self) -> list[dict]:
        rows = []
        for s in self.config.schemes:
            row = {"scheme": s, "mse_mean": float(self.mse[s].mean()), "mae_mean": float(self.mae[s].mean())}
            if self.config.replications >= 2:
                row["mse_ci"] = float(ci_halfwidth(self.mse[s], self.config.ci))
                row["mae_ci"] = float(ci_halfwidth(self.mae[s], self.config.ci))
            rows.append(row)
        return rows

    def p_value(self, better: str, worse: str, metric: str = "mse") -> float:
        values = self.mse if metric == "mse" else self.mae
        return paired_test(values[better], values[worse], "less")


def _pan_replication(cfg: PanConfig, replication: int):
    seed = cfg.seed + replication
    env: DirichletEnv = make_environment(cfg.env, seed)
    policy = Policy("pan_exposure", env=env)
    history = InteractionHistory(*env.shape, n_per_step=1, no_repeat=True)
    root = SeededRng(seed, ("pan",))
    for t in range(1, cfg.steps + 1):
        rec, plog = recommend(policy, None, history, root.child("rec", t).generator())
        ratings = rate_step(env, rec, root.child("ratings", t).generator())
        history = record_step(history, rec, ratings, plog)
    train = history.truncate(cfg.train_steps)

    test_rng = root.child("test").generator()
    users, items = [], []
    consumed = history.consumed
    for u in range(env.n_users):
        pool = np.flatnonzero(~consumed[u])
        pick = np.sort(test_rng.choice(pool, size=cfg.test_per_user, replace=False))
        users.append(np.full(pick.size, u))
        items.append(pick)
    users = np.concatenate(users)
    items = np.concatenate(items)
    truth = env.sample(users, items, test_rng)

    fit_seed = int(root.child("fit").generator().integers(2**63))
    mse, mae = {}, {}
    for scheme in cfg.schemes:
        weights = weights_for(scheme, train)
        params = fit_weighted_sgd(train, weights, cfg.model, seed=fit_seed)
        preds = np.einsum("nk,nk->n", params.user_vectors[users], params.item_vectors[items])
        mse[scheme], mae[scheme] = mse_mae(preds, truth)
    return mse, mae


def run_pan_benchmark(cfg: PanConfig, out: Optional[str] = None) -> PanResult:
    """Exposure-process benchmark comparing weight schemes on held-out ratings.

    Exposure follows the environment's own popularity-and-similarity process,
    not a fitted model. The first ``train_steps`` interactions per user train
    one SGD model per scheme; ``test_per_user`` never-consumed items per user
    are rated for evaluation.
    """
    per_rep = _parallel(_pan_replication, cfg, cfg.replications, cfg.n_jobs)
    mse = {s: np.array([r[0][s] for r in per_rep]) for s in cfg.schemes}
    mae = {s: np.array([r[1][s] for r in per_rep]) for s in cfg.schemes}
    result = PanResult(cfg, mse, mae)
    if out is not None:
        write_pan_csv(result, out)
    return result


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

VALUE_COLUMNS = ("arm", "replication", "timestep", "metric", "value")
SUMMARY_COLUMNS = ("arm", "timestep", "metric", "mean", "ci_halfwidth")


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def _write(path: Path, header, rows) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_csv(report: ExperimentReport, path) -> tuple[Path, Path]:
    """Write ``results.csv`` (long format) and ``summary.csv`` into directory ``path``.

    The summary's ``ci_halfwidth`` column is present only with two or more
    replications.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    values = out / "results.csv"
    summary = out / "summary.csv"
    _write(values, VALUE_COLUMNS, report.value_rows())
    header = SUMMARY_COLUMNS if report.replications >= 2 else SUMMARY_COLUMNS[:-1]
    _write(summary, header, report.summary_rows())
    return values, summary


def write_pan_csv(result: PanResult, path) -> tuple[Path, Path]:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    values = out / "pan_results.csv"
    summary = out / "pan_summary.csv"
    rows = (
        [s, r, m, result.mse[s][r] if m == "mse" else result.mae[s][r]]
        for s in result.config.schemes
        for r in range(result.config.replications)
        for m in ("mse", "mae")
    )
    _write(values, ("scheme", "replication", "metric", "value"), rows)
    table = result.table()
    cols = ["scheme", "mse_mean", "mse_ci", "mae_mean", "mae_ci"]
    if result.config.replications < 2:
        cols = ["scheme", "mse_mean", "mae_mean"]
    _write(summary, cols, ([row[c] for c in cols] for row in table))
    return values, summary


def dump_final_weights(series: MetricSeries, cfg: ExperimentConfig) -> str:
    """Weight dump of an arm's final history under the configured estimator."""
    if series.history is None:
        raise ValueError("run the arm with keep_history=True")
    scheme = cfg.estimator if series.arm == "cafl" else "naive"
    kwargs = {"exclude": _replication(cfg, series.replication).test_mask} if scheme == "cafl_general" else {}
    return dumps_weights(weights_for(scheme, series.history, **kwargs))
