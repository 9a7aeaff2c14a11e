"""Command-line front end.

Exit codes: 0 success, 1 weight-condition check failed, 2 invalid input or
configuration, 3 solver or bootstrap failure, 4 Monte Carlo study failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import CsvSchema, DataError, load_csv, validate
from .inference import (
    DegenerateBootstrapError,
    bootstrap_covariance,
    inference_report,
)
from .resampling import (
    BootstrapError,
    ReplicateSpec,
    WeightConfigError,
    WeightScheme,
    default_workers,
    run_bootstrap,
    verify_weight_conditions,
)
from .simulation import (
    EngineConfig,
    Scenario,
    StudyError,
    coverage_from_run,
    run_engine,
    run_se_study,
    size_from_run,
    write_coverage_table,
    write_se_table,
    write_size_table,
)
from .solver import FitConfig, RankDeficientError, SolverError, fit, lambda_upper_bound
from .tuning import TuningConfig, select

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_SOLVER, EXIT_STUDY = 0, 1, 2, 3, 4

log = logging.getLogger("panelqr")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    def __init__(self, command, args, out: Path, inputs=()):
        self.out = out
        self.t0 = time.perf_counter()
        self.body = {
            "command": command,
            "config": {k: v for k, v in vars(args).items() if k != "func"},
            "seed": getattr(args, "seed", None),
            "version": __version__,
            "inputs": {str(p): _sha256(p) for p in inputs},
            "outputs": [],
        }

    def add(self, name: str, **extra):
        self.body["outputs"].append(name)
        self.body.update(extra)

    def write(self, status="ok"):
        self.body["status"] = status
        self.body["wall_time_seconds"] = time.perf_counter() - self.t0
        self.body["timestamp"] = datetime.now(timezone.utc).isoformat()
        (self.out / "manifest.json").write_text(json.dumps(self.body, indent=2, default=str) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps({"manifest": "manifest.json", **obj}, indent=2) + "\n")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PANELQR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise DataError(f"PANELQR_SEED must be an integer, got {env!r}") from None


def _schema(args) -> CsvSchema:
    if args.schema:
        return CsvSchema.from_dict(json.loads(Path(args.schema).read_text()))
    x = tuple(c for c in (args.x or "").split(",") if c)
    return CsvSchema(unit=args.unit, y=args.y, x=x, time=args.time)


def _load(args):
    data = load_csv(args.data, _schema(args))
    for w in validate(data).warnings:
        print(f"warning: {w}", file=sys.stderr)
    return data


def _fit_stage(args, data, manifest, out: Path):
    tau = args.tau
    if args.tune:
        tr = select(data, tau, TuningConfig(criterion=args.tune, n_points=args.grid_points, normalize_by_T=args.normalize_by_T))
        lam = tr.chosen_lambda
        res = tr.chosen_fit
        tr.write_trace(out / "tables" / "tuning.csv")
        _write_json(out / "tuning.json", tr.to_dict())
        manifest.add("tuning.json")
        manifest.add("tables/tuning.csv", chosen_lambda=lam, reported_lambda=tr.reported_lambda)
    else:
        lam = args.lam if args.lam is not None else 0.0
        lam_u = lambda_upper_bound(tau, data.max_T)
        if lam > lam_u:
            print(
                f"warning: lambda {lam:g} exceeds the upper bound max(tau, 1 - tau) * max T_i = {lam_u:g}; "
                "every intercept is zero",
                file=sys.stderr,
            )
        res = fit(data, FitConfig(tau, lam, tol=args.tol))
    if res.certificate is not None and not res.certificate.passed:
        print("warning: optimality certificate failed", file=sys.stderr)
    body = res.to_dict()
    body["covariate_names"] = list(data.covariate_names)
    body["unit_ids"] = [str(u) for u in data.unit_ids]
    _write_json(out / "fit.json", body)
    df = data.to_frame()
    df["residual"] = res.residuals
    df.to_csv(out / "residuals.csv", index=False, float_format="%.17g")
    manifest.add("fit.json")
    manifest.add("residuals.csv")
    return res, FitConfig(tau, res.lam, tol=args.tol)


def cmd_fit(args) -> int:
    out = Path(args.out)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    man = Manifest("fit", args, out, [args.data])
    data = _load(args)
    res, _ = _fit_stage(args, data, man, out)
    man.write()
    print(json.dumps({"lambda": res.lam, "beta": res.beta.tolist(), "objective": res.objective, "active_count": res.active_count}))
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    out = Path(args.out)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    args.seed = _seed(args)
    man = Manifest("bootstrap", args, out, [args.data])
    data = _load(args)
    res, cfg = _fit_stage(args, data, man, out)
    spec = ReplicateSpec(args.method, WeightScheme(args.weights, args.tau), a_T=args.a_T, adjust_residuals=args.adjust_residuals)
    workers = args.workers or default_workers()
    boot = run_bootstrap(data, res, spec, cfg, args.B, args.seed, workers=workers)
    boot.write_draws(out / "draws.csv", data.covariate_names)
    cov = bootstrap_covariance(boot)
    np.savetxt(out / "tables" / "omega_star.csv", cov.omega_star, delimiter=",", fmt="%.17g")
    report = {
        "level": args.level,
        "method": boot.method,
        "B": boot.B,
        "seed": boot.seed,
        "lambda": boot.lam,
        "failures": boot.failures,
        "metadata": boot.metadata,
        "coefficients": inference_report(res, boot, args.level, list(data.covariate_names)),
    }
    _write_json(out / "inference.json", report)
    for name in ("draws.csv", "tables/omega_star.csv", "inference.json"):
        man.add(name)
    man.write()
    for row in report["coefficients"]:
        print(f"{row['coef']}: {row['estimate']:.6g}  se {row['se']:.4g}  {int(100 * args.level)}% CI [{row['ci_low']:.6g}, {row['ci_high']:.6g}]")
    return EXIT_OK


def cmd_simulate(args) -> int:
    out = Path(args.out)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    scenario = Scenario.from_json(args.scenario)
    if args.seed is not None or "PANELQR_SEED" in os.environ:
        scenario = Scenario.from_dict({**scenario.to_dict(), "seed": _seed(args)})
    args.seed = scenario.seed
    man = Manifest("simulate", args, out, [args.scenario])
    workers = args.workers or default_workers()
    methods = tuple(m for m in args.methods.split(",") if m)
    logp = out / "replicates.jsonl"
    tune = TuningConfig(criterion=args.tune, n_points=args.grid_points)
    try:
        if args.study == "se":
            grid = tuple(float(v) for v in args.lambda_grid.split(","))
            res = run_se_study(scenario, args.M, args.B, grid, methods, workers=workers, log_path=logp)
            write_se_table(res, out / "tables" / "figure1.csv")
            man.add("tables/figure1.csv")
        else:
            cfg = EngineConfig(M=args.M, B=args.B, methods=methods, tune=tune, fixed_lambda=args.lam)
            run = run_engine(scenario, cfg, workers=workers, log_path=logp, use_cache=False)
            if args.study == "coverage":
                res = coverage_from_run(run, args.level)
                write_coverage_table([res], out / "tables" / "table1.csv")
                man.add("tables/table1.csv")
            else:
                res = size_from_run(run, args.alpha)
                write_size_table([res], out / "tables" / "table2.csv")
                man.add("tables/table2.csv")
    except StudyError as e:
        for line in e.failure_log[:20]:
            print(line, file=sys.stderr)
        man.write(status="failed")
        raise
    _write_json(out / "study.json", res.to_dict())
    man.add("study.json")
    man.add("replicates.jsonl")
    man.write()
    print(json.dumps({"study": args.study, "rates": res.rates, "M": res.M, "B": res.B}))
    return EXIT_OK


def cmd_weights_check(args) -> int:
    scheme = WeightScheme(args.scheme, args.tau, swapped_masses=args.swapped_masses)
    rep = verify_weight_conditions(scheme)
    print(rep.table())
    print("all conditions hold" if rep.passed else "some conditions fail")
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def _data_args(p):
    p.add_argument("--data", required=True, help="long-format CSV with a header row")
    p.add_argument("--schema", help="JSON column mapping {unit, time, y, x: [...]}")
    p.add_argument("--unit", default="unit")
    p.add_argument("--time", default=None)
    p.add_argument("--y", default="y")
    p.add_argument("--x", default="", help="comma-separated covariate columns")
    p.add_argument("--tau", type=float, required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--tune", choices=("bic", "gcv"))
    p.add_argument("--grid-points", type=int, default=25)
    p.add_argument("--normalize-by-T", action="store_true")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="panelqr", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the penalized model")
    _data_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bootstrap", help="fit, then bootstrap the slopes")
    _data_args(p)
    p.add_argument("--method", choices=("wb1", "wb2", "pairs"), default="wb1")
    p.add_argument("--B", type=int, default=400)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--level", type=float, default=0.90)
    p.add_argument("--a-T", dest="a_T", type=float, default=None)
    p.add_argument("--weights", choices=("twopoint", "he"), default="twopoint")
    p.add_argument("--adjust-residuals", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("simulate", help="Monte Carlo coverage, size or standard-error study")
    p.add_argument("--scenario", required=True)
    p.add_argument("--study", choices=("coverage", "size", "se"), required=True)
    p.add_argument("--M", type=int, default=300)
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--level", type=float, default=0.90)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--methods", default="pairs,wb1,wb2")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="fixed penalty instead of tuning")
    p.add_argument("--lambda-grid", default="0.01,0.06,0.2")
    p.add_argument("--tune", choices=("bic", "gcv"), default="gcv")
    p.add_argument("--grid-points", type=int, default=25)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("weights-check", help="verify the bootstrap weight conditions")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--scheme", choices=("twopoint", "he"), default="twopoint")
    p.add_argument("--swapped-masses", dest="swapped_masses", action="store_true", help="swap the two-point masses (fails the quantile condition unless tau = 0.5)")
    p.set_defaults(func=cmd_weights_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, RankDeficientError, WeightConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, BootstrapError, DegenerateBootstrapError) as e:
        print(f"error: {e}", file=sys.stderr)
        for line in getattr(e, "failure_log", [])[:20]:
            print(line, file=sys.stderr)
        return EXIT_SOLVER
    except StudyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STUDY
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
