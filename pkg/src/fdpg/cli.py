"""Command-line front end.

Subcommands:
  run         one (experiment, divergence, seed) cell
  sweep       the declared divergence x seed cross product
  oracle      the acceptance checks, written as an OracleReport CSV
  eval        metrics for a saved policy checkpoint against an experiment
  fit-lambda  exponential-family coefficients for a gdc-dist experiment

Exit codes: 0 success, 1 config errors, 2 estimator aborts mid-run.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import math
import sys
from pathlib import Path

from .errors import ConfigError, FdpgError, InfinitePseudoRewardError, TrainAbortedError
from .experiments import ExperimentSpec, builtin_experiment, builtin_experiments, load_config
from .policy import load_policy, save_policy
from .targets import MomentSpec, fit_lambda
from .features import parse_feature
from .trainer import RunRecord, evaluate_metrics, train

SUMMARY_COLUMNS = [
    "experiment",
    "divergence",
    "seed",
    "steps",
    "kl",
    "rkl",
    "tv",
    "js",
    "kl_from_base",
    "alignment",
    "entropy",
    "distinct_1",
    "reward_mean",
    "reward_std",
    "z_hat",
    "z_exact",
    "z_source",
]


def _fmt_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.12g}"
    return str(value)


def write_outputs(out_dir: Path, spec: ExperimentSpec, divergence: str, seed: int,
                  record: RunRecord, policy) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    header = record.header()
    header["experiment"] = spec.echo()
    header["divergence"] = divergence
    header["seed"] = seed
    with open(out_dir / "metrics.jsonl", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in record.serializable_rows():
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        if record.rows:
            final = record.final_row()
            meta = {
                "experiment": spec.name,
                "divergence": divergence,
                "seed": seed,
                "steps": final["step"],
            }
            writer.writerow([_fmt_cell(meta.get(c, final.get(c))) for c in SUMMARY_COLUMNS])
    if policy is not None:
        save_policy(policy, out_dir / "policy.ckpt")
    # Timing is non-deterministic by nature, so it lives outside metrics.jsonl.
    with open(out_dir / "timing.txt", "w") as fh:
        for row, t in zip(record.rows, record.timings):
            fh.write(f"step {row['step']}: {t:.3f}s\n")


def _load_spec(args) -> ExperimentSpec:
    if getattr(args, "config", None):
        return load_config(args.config)
    if getattr(args, "experiment", None):
        return builtin_experiment(args.experiment)
    raise ConfigError("provide --config PATH or --experiment NAME")


def _run_cell(spec: ExperimentSpec, divergence: str, seed: int, out_root: Path,
              steps_override: int | None, exact_z: bool | None) -> Path:
    extra = {}
    if steps_override is not None:
        extra["steps"] = steps_override
    if exact_z is not None:
        extra["z_mode"] = "exact" if exact_z else "estimated"
    config = spec.train_config(divergence, seed, **extra)
    base, policy, target, alignment = spec.build()
    out_dir = out_root / spec.name / divergence / str(seed)
    try:
        policy, record = train(config, policy, target, base=base,
                               alignment_feature=alignment)
    except TrainAbortedError as exc:
        record = RunRecord(config_echo={"divergence": divergence, "seed": seed})
        record.error = {"step": exc.step, "message": str(exc.cause)}
        write_outputs(out_dir, spec, divergence, seed, record, None)
        raise
    write_outputs(out_dir, spec, divergence, seed, record, policy)
    return out_dir


def cmd_run(args) -> int:
    spec = _load_spec(args)
    divergence = args.divergence or spec.divergences[0]
    seed = args.seed if args.seed is not None else spec.seeds[0]
    out_dir = _run_cell(spec, divergence, seed, Path(args.out), args.steps, args.exact_z)
    print(f"wrote {out_dir}")
    return 0


def _sweep_cell(payload):
    spec, divergence, seed, out, steps, exact_z = payload
    _run_cell(spec, divergence, seed, Path(out), steps, exact_z)
    return divergence, seed


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    cells = [
        (spec, divergence, seed, args.out, args.steps, args.exact_z)
        for divergence in spec.divergences
        for seed in spec.seeds
    ]
    if args.threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.threads) as pool:
            for divergence, seed in pool.map(_sweep_cell, cells):
                print(f"done {spec.name}/{divergence}/{seed}")
    else:
        for cell in cells:
            divergence, seed = _sweep_cell(cell)
            print(f"done {spec.name}/{divergence}/{seed}")
    return 0


def cmd_oracle(args) -> int:
    from .acceptance import run_acceptance
    from .oracle import write_reports_csv

    reports, ok = run_acceptance(quick=args.quick, echo=print)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports_csv(reports, out / "oracle_report.csv")
    print(f"wrote {out / 'oracle_report.csv'}")
    return 0 if ok else 2


def cmd_eval(args) -> int:
    spec = _load_spec(args)
    base, _, target, alignment = spec.build()
    policy = load_policy(args.ckpt)
    if spec.target_kind == "conditional":
        raise ConfigError("eval supports unconditional experiments only")
    row = evaluate_metrics(
        policy,
        target,
        base,
        budget=args.budget,
        mode="exact" if args.exact else "sampled",
        master_seed=args.seed or 0,
        alignment_feature=alignment,
    )
    print(json.dumps({k: ("inf" if isinstance(v, float) and math.isinf(v) else v)
                      for k, v in row.items()}, sort_keys=True, indent=2))
    return 0


def cmd_fit_lambda(args) -> int:
    spec = _load_spec(args)
    if spec.target_kind != "gdc-dist":
        raise ConfigError(f"experiment {spec.name!r} has no distributional moments")
    base = spec.make_base()
    specs = [MomentSpec(parse_feature(fs), desired) for fs, desired in spec.moments]
    lambdas = fit_lambda(base, specs, tol=spec.fit_tol)
    from .targets import gdc_dist_target

    target = gdc_dist_target(base, [(s.feature, lam) for s, lam in zip(specs, lambdas)])
    dist = target.exact_distribution()
    import numpy as np

    for s, lam in zip(specs, lambdas):
        achieved = float(np.dot(dist.mass, s.feature.values(base.space)))
        print(f"{s.feature.name}: lambda={lam:.12g} desired={s.desired} achieved={achieved:.12g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdpg")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_seed=True):
        p.add_argument("--config", help="experiment config file")
        p.add_argument(
            "--experiment",
            help="builtin experiment name: " + ", ".join(s.name for s in builtin_experiments()),
        )
        p.add_argument("--out", default="out", help="output directory root")
        if with_seed:
            p.add_argument("--seed", type=int, default=None)

    p_run = sub.add_parser("run", help="run one (experiment, divergence, seed) cell")
    common(p_run)
    p_run.add_argument("--divergence", default=None)
    p_run.add_argument("--steps", type=int, default=None)
    p_run.add_argument("--exact-z", type=lambda s: s.lower() in ("1", "true", "yes"),
                       default=None, metavar="BOOL")
    p_run.add_argument("--threads", type=int, default=1,
                       help="worker processes (single cell: no effect)")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the divergence x seed cross product")
    common(p_sweep, with_seed=False)
    p_sweep.add_argument("--steps", type=int, default=None)
    p_sweep.add_argument("--exact-z", type=lambda s: s.lower() in ("1", "true", "yes"),
                         default=None, metavar="BOOL")
    p_sweep.add_argument("--threads", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    p_oracle = sub.add_parser("oracle", help="run acceptance checks, write OracleReport CSV")
    p_oracle.add_argument("--out", default="out")
    p_oracle.add_argument("--quick", action="store_true",
                          help="skip the slow training-based checks")
    p_oracle.set_defaults(func=cmd_oracle)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint against an experiment")
    common(p_eval)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--budget", type=int, default=16384)
    p_eval.add_argument("--exact", action="store_true", default=True)
    p_eval.add_argument("--sampled", dest="exact", action="store_false")
    p_eval.set_defaults(func=cmd_eval)

    p_fit = sub.add_parser("fit-lambda", help="fit distributional-constraint coefficients")
    common(p_fit)
    p_fit.set_defaults(func=cmd_fit_lambda)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (TrainAbortedError, InfinitePseudoRewardError) as exc:
        print(f"estimator abort: {exc}", file=sys.stderr)
        return 2
    except FdpgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
