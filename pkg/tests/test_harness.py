import csv
import math

import numpy as np
import pytest

from recloop.harness import (
    ARM_METRICS,
    ARMS,
    METRICS,
    EnvConfig,
    ExperimentConfig,
    ExperimentReport,
    PanConfig,
    ci_halfwidth,
    dump_final_weights,
    load_config,
    load_pan_config,
    paired_test,
    run_arm,
    run_experiment,
    run_pan_benchmark,
    write_csv,
)
from recloop.recommenders import MFConfig, Policy


def tiny(**kw):
    base = dict(
        env=EnvConfig(n_users=12, n_items=15, n_factors=3),
        model=MFConfig(n_factors=2, reg=0.5, als_sweeps=4),
        policy=Policy("topn", epsilon=0.2),
        horizon=4,
        test_size=40,
        replications=2,
        seed=3,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


def test_row_count_and_columns(tmp_path):
    cfg = tiny()
    report = run_experiment(cfg, out=tmp_path)
    rows = read_csv(tmp_path / "results.csv")
    assert rows[0] == ["arm", "replication", "timestep", "metric", "value"]
    assert len(rows) - 1 == len(ARMS) * 2 * 4 * len(METRICS)
    summary = read_csv(tmp_path / "summary.csv")
    assert summary[0] == ["arm", "timestep", "metric", "mean", "ci_halfwidth"]
    assert len(summary) - 1 == len(ARMS) * 4 * len(METRICS)
    assert report.arms == ARMS and report.horizon == 4 and report.replications == 2
    raw = (tmp_path / "results.csv").read_bytes()
    assert raw.endswith(b"\n") and b"\r" not in raw


def test_without_shadow_there_is_no_feedback_effect():
    report = run_experiment(tiny(arms=("feedback", "cafl"), replications=1))
    assert report.metrics == ARM_METRICS


def test_single_replication_has_no_ci_column(tmp_path):
    report = run_experiment(tiny(replications=1, arms=("feedback",)), out=tmp_path)
    assert read_csv(tmp_path / "summary.csv")[0] == ["arm", "timestep", "metric", "mean"]
    assert report.ci("feedback", "rmse") is None


def test_csv_round_trip_recovers_values(tmp_path):
    report = run_experiment(tiny(arms=("feedback", "uniform")), out=tmp_path)
    rows = read_csv(tmp_path / "results.csv")[1:]
    for arm, rep, t, metric, value in rows:
        expected = report.stack(arm, metric)[int(rep), int(t) - 1]
        assert float(value) == expected


def test_empty_report_writes_headers_only(tmp_path):
    write_csv(ExperimentReport(None, ()), tmp_path)
    assert (tmp_path / "results.csv").read_text() == "arm,replication,timestep,metric,value\n"
    assert (tmp_path / "summary.csv").read_text() == "arm,timestep,metric,mean\n"


def test_rerun_is_bit_identical(tmp_path):
    cfg = tiny()
    run_experiment(cfg, out=tmp_path / "a")
    run_experiment(cfg, out=tmp_path / "b")
    for name in ("results.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_matches_serial():
    cfg = tiny(arms=("feedback", "cafl"))
    serial = run_experiment(cfg)
    parallel = run_experiment(cfg.replace(n_jobs=2))
    for arm in cfg.arms:
        np.testing.assert_array_equal(serial.stack(arm, "rmse"), parallel.stack(arm, "rmse"))


def test_replication_streams_are_independent_of_order():
    cfg = tiny(arms=("cafl",))
    full = run_experiment(cfg)
    alone = run_arm(cfg, "cafl", replication=1)
    np.testing.assert_array_equal(full.stack("cafl", "ndcg")[1], alone.values["ndcg"])


def test_arms_share_environment_and_first_step():
    cfg = tiny()
    series = [run_arm(cfg, arm, 0, keep_history=True) for arm in ARMS]
    assert len({s.env_checksum for s in series}) == 1
    first = [s.history.steps[0] for s in series]
    for step in first[1:]:
        np.testing.assert_array_equal(step.users, first[0].users)
        np.testing.assert_array_equal(step.items, first[0].items)
        np.testing.assert_array_equal(step.ratings, first[0].ratings)
    assert series[0].env_checksum != run_arm(cfg, "feedback", 1).env_checksum


def test_single_step_arms_coincide():
    # one step: every arm sees the same random draw and the same fit seed; the
    # unweighted arms agree exactly, cafl only in distribution because test
    # pairs make per-user propensities unequal
    cfg = tiny(horizon=1, replications=200)
    report = run_experiment(cfg)
    for metric in ("rmse", "ndcg", "jaccard", "rec_rating"):
        ref = report.stack("feedback", metric)
        for arm in ("uniform", "random_shadow"):
            np.testing.assert_array_equal(report.stack(arm, metric), ref)
    np.testing.assert_array_equal(report.stack("feedback", "feedback_effect"), 0.0)
    for metric in ("rmse", "ndcg"):
        a, b = report.final("cafl", metric), report.final("feedback", metric)
        se = math.hypot(a.std(ddof=1), b.std(ddof=1)) / math.sqrt(a.size)
        assert abs(a.mean() - b.mean()) <= 3 * se


def test_no_test_pair_is_ever_recommended():
    cfg = tiny(horizon=6)
    from recloop.harness import _replication

    mask = _replication(cfg, 0).test_mask
    for arm in ARMS:
        h = run_arm(cfg, arm, 0, keep_history=True).history
        assert not (h.consumed & mask).any()


def test_shadow_observations_ignore_ratings():
    # the shadow arm's observed pairs do not depend on the environment's ratings
    a = run_arm(tiny(), "random_shadow", 0, keep_history=True).history
    b = run_arm(tiny(env=EnvConfig(n_users=12, n_items=15, n_factors=3, sigma2=1.0)), "random_shadow", 0,
                keep_history=True).history
    for sa, sb in zip(a.steps, b.steps):
        np.testing.assert_array_equal(sa.items, sb.items)


def test_cafl_with_fully_random_policy_tracks_uniform():
    cfg = tiny(policy=Policy("topn", epsilon=1.0), replications=50, arms=("cafl", "uniform"), horizon=3)
    report = run_experiment(cfg)
    diff = report.final("cafl", "rmse") - report.final("uniform", "rmse")
    se = diff.std(ddof=1) / math.sqrt(diff.size)
    assert abs(diff.mean()) <= 3 * se + 1e-12


def test_sgd_trainer_and_retrain_interval():
    report = run_experiment(tiny(trainer="sgd", model=MFConfig(n_factors=2, epochs=3), retrain_every=2,
                                 replications=1, arms=("cafl",)))
    assert np.isfinite(report.stack("cafl", "rmse")).all()


def test_warm_start_runs():
    report = run_experiment(tiny(warm_start=True, replications=1, arms=("feedback",)))
    assert np.isfinite(report.stack("feedback", "mse")).all()


def test_general_estimator_in_loop():
    cfg = tiny(estimator="cafl_general", replications=1, arms=("cafl",))
    s = run_arm(cfg, "cafl", 0, keep_history=True)
    text = dump_final_weights(s, cfg)
    assert text.splitlines()[0] == "s\tu\ti\tweight\tscheme"
    assert text.splitlines()[1].endswith("cafl_general")


def test_config_validation():
    with pytest.raises(ValueError, match="exceeds U\\*I"):
        tiny(horizon=20)
    with pytest.raises(ValueError):
        tiny(arms=("bogus",))
    with pytest.raises(ValueError):
        tiny(trainer="adam")
    with pytest.raises(ValueError):
        EnvConfig(kind="movielens")


def test_ci_halfwidth_and_paired_test():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert ci_halfwidth(x) == pytest.approx(1.96 * np.std(x, ddof=1) / 2)
    assert ci_halfwidth(x, "t") > ci_halfwidth(x)
    with pytest.raises(ValueError):
        ci_halfwidth(np.array([1.0]))
    assert paired_test(x, x) == 1.0
    assert paired_test(x, x + np.array([1.0, 1.1, 0.9, 1.05])) < 0.01


def test_load_config_sections(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(
        "environment:\n  U: 20\n  I: 30\n  K: 4\n  sigma2: 0.1\n"
        "model:\n  model: sgd\n  K: 3\n  lambda: 0.2\n  policy: softmax\n  tau: 0.5\n"
        "experiment:\n  T: 5\n  test_size: 50\n  replications: 2\n  seed: 9\n  arms: feedback,cafl\n"
        "estimator: naive\n"
    )
    cfg = load_config(path)
    assert (cfg.env.n_users, cfg.env.n_items, cfg.env.n_factors, cfg.env.sigma2) == (20, 30, 4, 0.1)
    assert cfg.trainer == "sgd" and cfg.model.n_factors == 3 and cfg.model.reg == 0.2
    assert cfg.policy.kind == "softmax" and cfg.policy.tau == 0.5
    assert cfg.horizon == 5 and cfg.arms == ("feedback", "cafl") and cfg.estimator == "naive"
    with pytest.raises(ValueError, match="unknown keys"):
        load_config({"environment": {"users": 3}})
    with pytest.raises(ValueError, match="unknown config sections"):
        load_config({"extras": {}})


def test_pan_benchmark_small(tmp_path):
    cfg = PanConfig(env=EnvConfig(kind="dirichlet", n_users=20, n_items=30, n_factors=4),
                    model=MFConfig(n_factors=3, epochs=5), steps=6, train_steps=5, test_per_user=5,
                    replications=2)
    result = run_pan_benchmark(cfg, out=tmp_path)
    assert [row["scheme"] for row in result.table()] == ["naive", "popularity", "cafl"]
    assert 0 <= result.p_value("cafl", "naive") <= 1
    rows = read_csv(tmp_path / "pan_results.csv")
    assert rows[0] == ["scheme", "replication", "metric", "value"]
    assert len(rows) - 1 == 3 * 2 * 2
    again = run_pan_benchmark(cfg)
    np.testing.assert_array_equal(again.mse["cafl"], result.mse["cafl"])
    with pytest.raises(ValueError):
        PanConfig(env=EnvConfig(kind="latent"))


def test_load_pan_config():
    cfg = load_pan_config({"environment": {"U": 50, "I": 40}, "model": {"K": 4}, "pan": {"steps": 10,
                                                                                        "train_steps": 8}})
    assert cfg.env.kind == "dirichlet" and cfg.env.n_users == 50
    assert cfg.model.n_factors == 4 and cfg.train_steps == 8
    one = PanConfig(env=EnvConfig(kind="dirichlet", n_users=10, n_items=30, n_factors=3),
                    model=MFConfig(n_factors=2, epochs=2), steps=3, train_steps=3, test_per_user=3,
                    replications=1)
    assert "mse_ci" not in run_pan_benchmark(one).table()[0]


def test_shipped_configs_match_defaults():
    import dataclasses
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    desk = load_config(root / "desk.yaml")
    assert desk == ExperimentConfig(env=dataclasses.replace(ExperimentConfig().env, sigma2=0.25))
    pan = load_pan_config(root / "pan.yaml")
    assert pan == PanConfig(env=dataclasses.replace(PanConfig().env, sigma2=0.01))
    load_config(root / "smoke.yaml")
