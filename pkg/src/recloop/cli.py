"""Command-line entry point: ``recloop run | pan-bench | oracle-check``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence


from .core import SeededRng

log = logging.getLogger("recloop")

ORACLE_SIZES = {"tiny": 5, "small": 20, "medium": 60}


def _cmd_run(args) -> int:
    from .harness import load_config, run_experiment

    cfg = load_config(args.config)
    changes = {}
    if args.arms:
        changes["arms"] = tuple(a.strip() for a in args.arms.split(",") if a.strip())
    if args.reps is not None:
        changes["replications"] = args.reps
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.jobs is not None:
        changes["n_jobs"] = args.jobs
    if changes:
        cfg = cfg.replace(**changes)
    report = run_experiment(cfg, out=args.out)
    if args.dump_weights:
        from .harness import dump_final_weights, run_arm

        arm = "cafl" if "cafl" in cfg.arms else cfg.arms[0]
        series = run_arm(cfg, arm, 0, keep_history=True)
        Path(args.out, f"weights_{arm}.tsv").write_text(dump_final_weights(series, cfg), encoding="utf-8")
    for arm in report.arms:
        print(f"{arm:>14}  final rmse {report.mean(arm, 'rmse')[-1]:.4f}  ndcg {report.mean(arm, 'ndcg')[-1]:.4f}")
    print(f"wrote {Path(args.out) / 'results.csv'} and {Path(args.out) / 'summary.csv'}")
    return 0


def _cmd_pan(args) -> int:
    from .harness import load_pan_config, run_pan_benchmark

    cfg = load_pan_config(args.config)
    if args.reps is not None or args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(
            cfg,
            replications=cfg.replications if args.reps is None else args.reps,
            seed=cfg.seed if args.seed is None else args.seed,
        )
    result = run_pan_benchmark(cfg, out=args.out)
    for row in result.table():
        ci = f" ± {row['mse_ci']:.4f}" if "mse_ci" in row else ""
        ci_mae = f" ± {row['mae_ci']:.4f}" if "mae_ci" in row else ""
        print(f"{row['scheme']:>11}  MSE {row['mse_mean']:.4f}{ci}  MAE {row['mae_mean']:.4f}{ci_mae}")
    if "cafl" in cfg.schemes and cfg.replications >= 2:
        for other in cfg.schemes:
            if other != "cafl":
                print(f"paired p(MSE cafl < {other}) = {result.p_value('cafl', other):.4g}")
    print(f"wrote {Path(args.out) / 'pan_results.csv'} and {Path(args.out) / 'pan_summary.csv'}")
    return 0


def _oracle_cases(n_instances: int, seed: int):
    from .oracle import feedback_policy, random_tiny_world, uniform_policy
    from .core import LatentParams

    root = SeededRng(seed, ("oracle-check",))
    for k in range(n_instances):
        rng = root.child(k).generator()
        layout = "global" if k % 2 == 0 else "per_user"
        shape = None if layout == "global" else [(1, 3), (2, 3), (3, 2), (1, 5)][k % 4]
        world = random_tiny_world(rng, layout=layout, shape=shape)
        catalogue = world.n_pairs if layout == "global" else world.shape[1]
        t = min(3, catalogue - 1)
        params = LatentParams(rng.normal(size=(world.shape[0], 2)), rng.normal(size=(world.shape[1], 2)), 1.0)
        policy = feedback_policy(world) if k % 3 else uniform_policy(world)
        yield k, world, params, policy, t


def _cmd_oracle(args) -> int:
    from .oracle import exact_causal_objective, expected_estimator_value

    n = ORACLE_SIZES[args.size]
    failures = 0
    for k, world, params, policy, t in _oracle_cases(n, args.seed):
        target = exact_causal_objective(world, params, t)
        for scheme in ("cafl_special", "cafl_general"):
            value = expected_estimator_value(scheme, world, policy, params, t)
            ok = abs(value - target) <= 1e-10 * max(1.0, abs(target))
            failures += not ok
            print(f"{'PASS' if ok else 'FAIL'} instance {k:>3} {world.layout:>8} shape={world.shape} t={t} "
                  f"{scheme:<12} |diff|={abs(value - target):.2e}")
    print(f"{'all passed' if not failures else f'{failures} failed'} ({n} instances)")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recloop", description="Feedback-loop recommender simulations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the multi-arm experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--arms", help="comma-separated subset of feedback,cafl,uniform,random_shadow")
    run.add_argument("--reps", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs", type=int, help="parallel replications")
    run.add_argument("--dump-weights", action="store_true", help="write the corrected arm's final weights")
    run.set_defaults(func=_cmd_run)

    pan = sub.add_parser("pan-bench", help="run the exposure-process benchmark")
    pan.add_argument("--config", required=True)
    pan.add_argument("--out", required=True)
    pan.add_argument("--reps", type=int)
    pan.add_argument("--seed", type=int)
    pan.set_defaults(func=_cmd_pan)

    oracle = sub.add_parser("oracle-check", help="exact unbiasedness check on tiny worlds")
    oracle.add_argument("--size", choices=sorted(ORACLE_SIZES), default="small")
    oracle.add_argument("--seed", type=int, default=0)
    oracle.set_defaults(func=_cmd_oracle)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as exc:
        print(f"recloop {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
