"""Monte Carlo studies for the penalized estimator and its bootstraps.

Data-generating process (per unit i, period t)::

    x_it = 0.5 a_i + z_i + e_it,      z_i, e_it ~ chi2(3)
    y_it = a_i + x_it + (1 + zeta x_it) u_it

with true tau-quantile coefficients ``beta0 = 1 + zeta F^{-1}(tau)`` and
``alpha0_i = a_i + F^{-1}(tau)``.

One engine run draws M panels, fits each, and stores the bootstrap draws of
every requested method; coverage and size statistics are then read off the
stored draws, so a coverage study and a size study of the same scenario share
one run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .data import PanelData
from .inference import (
    BootstrapResult,
    bootstrap_covariance,
    bootstrap_t_test,
    critical_value_test,
    percentile_ci,
)
from .resampling import BootstrapError, ReplicateSpec, WeightScheme, run_bootstrap
from .solver import FitConfig, fit
from .tuning import TuningConfig, select

log = logging.getLogger(__name__)

ERROR_LAWS = ("normal", "t3", "chi2_3")
ALPHA_MODES = ("gaussian", "i_over_n")
METHOD_ORDER = ("pairs", "wb1", "wb2")
MAX_FAILURE_RATE = 0.05


class StudyError(RuntimeError):
    def __init__(self, message, failure_log=()):
        super().__init__(message)
        self.failure_log = list(failure_log)


def _law(name):
    return {"normal": stats.norm(), "t3": stats.t(3), "chi2_3": stats.chi2(3)}[name]


def error_quantile(law: str, tau: float) -> float:
    return float(_law(law).ppf(tau))


@dataclass(frozen=True)
class Scenario:
    N: int = 100
    T: int = 10
    tau: float = 0.5
    zeta: float = 0.0
    error_law: str = "normal"
    alpha_mode: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.T < 1:
            raise ValueError("N and T must be at least 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.zeta < 0:
            raise ValueError("zeta must be nonnegative")
        if self.error_law not in ERROR_LAWS:
            raise ValueError(f"error_law must be one of {ERROR_LAWS}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def from_json(cls, path) -> Scenario:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TruthRecord:
    beta0: float
    alpha0: np.ndarray
    quantile: float
    neg_scale_fraction: float = 0.0


def generate(scenario: Scenario, rng: np.random.Generator):
    """Draw one panel; returns ``(PanelData, TruthRecord)``."""
    N, T = scenario.N, scenario.T
    if scenario.alpha_mode == "gaussian":
        a = rng.standard_normal(N)
    else:
        a = np.arange(1, N + 1) / N
    z = rng.chisquare(3, N)
    e = rng.chisquare(3, (N, T))
    law = scenario.error_law
    if law == "normal":
        u = rng.standard_normal((N, T))
    elif law == "t3":
        u = rng.standard_t(3, (N, T))
    else:
        u = rng.chisquare(3, (N, T))
    x = 0.5 * a[:, None] + z[:, None] + e
    s = 1.0 + scenario.zeta * x
    y = a[:, None] + x + s * u
    q = error_quantile(law, scenario.tau)
    unit = np.repeat(np.arange(N), T)
    data = PanelData.from_arrays(unit, y.reshape(-1), x.reshape(-1, 1), times=np.tile(np.arange(1, T + 1), N), covariate_names=("x",))
    truth = TruthRecord(
        beta0=1.0 + scenario.zeta * q,
        alpha0=a + q,
        quantile=q,
        neg_scale_fraction=float(np.mean(s <= 0)),
    )
    return data, truth


@dataclass(frozen=True)
class EngineConfig:
    """Everything that determines a Monte Carlo run besides the scenario."""

    M: int = 300
    B: int = 200
    methods: tuple[str, ...] = ("pairs", "wb1", "wb2")
    tune: TuningConfig = TuningConfig()
    fixed_lambda: float | None = None
    weight: str = "twopoint"
    a_T: float | None = None
    adjust_residuals: bool = False

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "B": self.B,
            "methods": list(self.methods),
            "tune": self.tune.to_dict(),
            "fixed_lambda": self.fixed_lambda,
            "weight": self.weight,
            "a_T": self.a_T,
            "adjust_residuals": self.adjust_residuals,
        }


def _key(scenario: Scenario, cfg: EngineConfig) -> str:
    blob = json.dumps({"scenario": scenario.to_dict(), "engine": {**cfg.to_dict(), "M": None}, "v": __version__}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _replicate(scenario: Scenario, cfg: EngineConfig, m: int) -> dict:
    """One Monte Carlo replicate: generate, tune, fit, bootstrap."""
    ss = np.random.SeedSequence(scenario.seed, spawn_key=(m,))
    data, truth = generate(scenario, np.random.default_rng(ss))
    tau = scenario.tau
    if cfg.fixed_lambda is not None:
        lam = float(cfg.fixed_lambda)
        base = fit(data, FitConfig(tau, lam))
    else:
        tr = select(data, tau, cfg.tune)
        lam = tr.chosen_lambda
        base = tr.chosen_fit
    rec = {
        "m": m,
        "lambda": lam,
        "beta_hat": base.beta.tolist(),
        "beta0": truth.beta0,
        "active_count": base.active_count,
        "neg_scale_fraction": truth.neg_scale_fraction,
        "scale": math.sqrt(data.n_obs),
        "methods": {},
    }
    fc = FitConfig(tau, lam)
    for k, method in enumerate(cfg.methods):
        spec = ReplicateSpec(method, WeightScheme(cfg.weight, tau), a_T=cfg.a_T, adjust_residuals=cfg.adjust_residuals)
        seed = int(np.random.SeedSequence(scenario.seed, spawn_key=(m, 1 + METHOD_ORDER.index(spec.method))).generate_state(1)[0])
        br = run_bootstrap(data, base, spec, fc, cfg.B, seed, workers=1)
        rec["methods"][spec.method] = {"draws": br.draws[:, 0].tolist(), "failures": len(br.failures), "seed": seed}
    return rec


def _replicate_safe(args):
    scenario, cfg, m = args
    try:
        return _replicate(scenario, cfg, m)
    except (BootstrapError, ArithmeticError, ValueError, RuntimeError) as e:
        return {"m": m, "error": f"{type(e).__name__}: {e}"}


@dataclass
class EngineRun:
    scenario: Scenario
    config: EngineConfig
    records: list[dict]
    failures: list[dict]
    runtime: float
    resumed: int = 0

    def boot(self, rec: dict, method: str) -> BootstrapResult:
        d = rec["methods"][method]
        return BootstrapResult(
            draws=np.asarray(d["draws"]).reshape(-1, 1),
            method=method,
            B=self.config.B,
            seed=d["seed"],
            base_beta=np.asarray(rec["beta_hat"]),
            scale=rec["scale"],
            lam=rec["lambda"],
        )


_CACHE: dict[tuple, EngineRun] = {}


def run_engine(scenario: Scenario, cfg: EngineConfig, *, workers: int = 1, log_path=None, use_cache=True) -> EngineRun:
    """Run (or resume, or reuse) the Monte Carlo replicates ``0..M-1``.

    With ``log_path`` every finished replicate is appended as one JSON line;
    lines from an earlier run with the same configuration are reused.
    """
    key = (_key(scenario, cfg), cfg.M)
    if use_cache and key in _CACHE:
        return _CACHE[key]
    t0 = time.perf_counter()
    done: dict[int, dict] = {}
    cfg_key = key[0]
    if log_path is not None and Path(log_path).exists():
        for line in Path(log_path).read_text().splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            if r.get("key") == cfg_key and r["m"] < cfg.M:
                done[r["m"]] = r
    resumed = len(done)
    todo = [m for m in range(cfg.M) if m not in done]
    fh = open(log_path, "a") if log_path is not None else None
    try:
        args = [(scenario, cfg, m) for m in todo]
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                it = ex.map(_replicate_safe, args, chunksize=1)
                for r in it:
                    done[r["m"]] = r
                    if fh:
                        fh.write(json.dumps({"key": cfg_key, **r}) + "\n")
                        fh.flush()
        else:
            for a in args:
                r = _replicate_safe(a)
                done[r["m"]] = r
                if fh:
                    fh.write(json.dumps({"key": cfg_key, **r}) + "\n")
                    fh.flush()
    finally:
        if fh:
            fh.close()
    ordered = [done[m] for m in range(cfg.M)]
    failures = [r for r in ordered if "error" in r]
    if len(failures) > MAX_FAILURE_RATE * cfg.M:
        raise StudyError(
            f"{len(failures)} of {cfg.M} Monte Carlo replicates failed",
            [f"replicate {r['m']}: {r['error']}" for r in failures],
        )
    run = EngineRun(scenario, cfg, [r for r in ordered if "error" not in r], failures, time.perf_counter() - t0, resumed)
    if use_cache:
        _CACHE[key] = run
    return run


@dataclass
class StudyResult:
    kind: str
    scenario: Scenario
    M: int
    B: int
    rates: dict
    per_replicate: list[dict]
    runtime: float
    settings: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scenario": self.scenario.to_dict(),
            "M": self.M,
            "B": self.B,
            "rates": self.rates,
            "counts": self.counts,
            "settings": self.settings,
            "runtime_seconds": self.runtime,
            "failures": self.failures,
            "per_replicate": self.per_replicate,
            "version": __version__,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _rate(flags) -> tuple[float, int]:
    k = int(sum(flags))
    return (k / len(flags) if flags else math.nan), k


def coverage_from_run(run: EngineRun, level: float = 0.90) -> StudyResult:
    log_rows, flags = [], {m: [] for m in run.config.methods}
    for rec in run.records:
        row = {"m": rec["m"], "lambda": rec["lambda"], "estimate": rec["beta_hat"][0], "beta0": rec["beta0"]}
        for method in rec["methods"]:
            lo, hi = percentile_ci(run.boot(rec, method), level)
            cov = bool(lo[0] <= rec["beta0"] <= hi[0])
            flags[method].append(cov)
            row[method] = {"ci": [float(lo[0]), float(hi[0])], "covered": cov}
        log_rows.append(row)
    rates, counts = {}, {}
    for method, f in flags.items():
        rates[method], counts[method] = _rate(f)
    return StudyResult(
        kind="coverage",
        scenario=run.scenario,
        M=len(run.records),
        B=run.config.B,
        rates=rates,
        per_replicate=log_rows,
        runtime=run.runtime,
        settings={"level": level, **run.config.to_dict()},
        failures=[f"replicate {r['m']}: {r['error']}" for r in run.failures],
        counts=counts,
    )


def size_from_run(run: EngineRun, alpha: float = 0.05, approaches=("critical_values", "standard_errors")) -> StudyResult:
    log_rows = []
    flags = {(a, m): [] for a in approaches for m in run.config.methods}
    for rec in run.records:
        row = {"m": rec["m"], "lambda": rec["lambda"], "estimate": rec["beta_hat"][0], "beta0": rec["beta0"]}
        b = np.asarray(rec["beta_hat"])
        for method in rec["methods"]:
            boot = run.boot(rec, method)
            entry = {}
            if "critical_values" in approaches:
                rej = critical_value_test(b, boot, 0, rec["beta0"], alpha).reject
                flags[("critical_values", method)].append(rej)
                entry["reject_cv"] = rej
            if "standard_errors" in approaches:
                cov = bootstrap_covariance(boot)
                if cov.se[0] > 0:
                    rej = bootstrap_t_test(b, cov, 0, rec["beta0"], alpha).reject
                else:
                    rej = bool(b[0] != rec["beta0"])
                flags[("standard_errors", method)].append(rej)
                entry["reject_se"] = rej
                entry["se"] = float(cov.se[0])
            row[method] = entry
        log_rows.append(row)
    rates, counts = {}, {}
    for (a, m), f in flags.items():
        rates.setdefault(a, {})[m], counts.setdefault(a, {})[m] = _rate(f)
    return StudyResult(
        kind="size",
        scenario=run.scenario,
        M=len(run.records),
        B=run.config.B,
        rates=rates,
        per_replicate=log_rows,
        runtime=run.runtime,
        settings={"alpha": alpha, "approaches": list(approaches), **run.config.to_dict()},
        failures=[f"replicate {r['m']}: {r['error']}" for r in run.failures],
        counts=counts,
    )


def run_coverage_study(
    scenario: Scenario,
    M: int = 300,
    B: int = 200,
    level: float = 0.90,
    methods=("pairs", "wb1", "wb2"),
    tune: TuningConfig | None = None,
    *,
    workers: int = 1,
    log_path=None,
    **engine_kw,
) -> StudyResult:
    """Coverage of percentile intervals for the true slope, per method."""
    cfg = EngineConfig(M=M, B=B, methods=tuple(methods), tune=tune or TuningConfig(), **engine_kw)
    return coverage_from_run(run_engine(scenario, cfg, workers=workers, log_path=log_path), level)


def run_size_study(
    scenario: Scenario,
    M: int = 300,
    B: int = 200,
    alpha: float = 0.05,
    methods=("pairs", "wb1", "wb2"),
    approach="both",
    tune: TuningConfig | None = None,
    *,
    workers: int = 1,
    log_path=None,
    **engine_kw,
) -> StudyResult:
    """Rejection rates of two-sided tests at the true slope.

    ``approach`` is ``"critical_values"``, ``"standard_errors"`` or ``"both"``.
    """
    approaches = ("critical_values", "standard_errors") if approach == "both" else (approach,)
    cfg = EngineConfig(M=M, B=B, methods=tuple(methods), tune=tune or TuningConfig(), **engine_kw)
    return size_from_run(run_engine(scenario, cfg, workers=workers, log_path=log_path), alpha, approaches)


@dataclass
class SERow:
    lam: float
    method: str
    mc_sd: float
    mean_se: float
    bias_pct: float
    se_quantiles: dict
    M: int


def se_summary(run: EngineRun) -> list[SERow]:
    est = np.array([r["beta_hat"][0] for r in run.records])
    sd = float(est.std(ddof=1)) if est.size > 1 else 0.0
    rows = []
    for method in run.config.methods:
        se = np.array([bootstrap_covariance(run.boot(r, method)).se[0] for r in run.records])
        mean_se = float(se.mean())
        bias = 100.0 * (mean_se - sd) / sd if sd > 0 else (-100.0 if mean_se == 0 else math.inf)
        qs = dict(zip(("q05", "q25", "q50", "q75", "q95"), np.quantile(se, [0.05, 0.25, 0.5, 0.75, 0.95]).tolist()))
        rows.append(SERow(float(run.config.fixed_lambda), method, sd, mean_se, bias, qs, len(run.records)))
    return rows


def run_se_study(
    scenario: Scenario,
    M: int = 200,
    B: int = 200,
    lambda_grid=(0.01, 0.06, 0.2),
    methods=("wb1", "wb2"),
    *,
    workers: int = 1,
    log_path=None,
    **engine_kw,
) -> StudyResult:
    """Bootstrap standard errors against the Monte Carlo spread of the estimate, per penalty."""
    t0 = time.perf_counter()
    rows, failures = [], []
    for lam in lambda_grid:
        if lam < 0:
            raise ValueError("penalties must be nonnegative")
        cfg = EngineConfig(M=M, B=B, methods=tuple(methods), fixed_lambda=float(lam), **engine_kw)
        run = run_engine(scenario, cfg, workers=workers, log_path=log_path)
        rows.extend(se_summary(run))
        failures.extend(f"lambda {lam}: replicate {r['m']}: {r['error']}" for r in run.failures)
    table = [asdict(r) for r in rows]
    return StudyResult(
        kind="se",
        scenario=scenario,
        M=M,
        B=B,
        rates={f"{r.method}@{r.lam:g}": r.bias_pct for r in rows},
        per_replicate=table,
        runtime=time.perf_counter() - t0,
        settings={"lambda_grid": list(lambda_grid), "methods": list(methods)},
        failures=failures,
    )


# plot- and table-ready CSVs -----------------------------------------------


def _scenario_cols(s: Scenario):
    return [s.N, s.T, s.tau, s.zeta, s.error_law, s.alpha_mode]


SCENARIO_HEADER = ["N", "T", "tau", "zeta", "error_law", "alpha_mode"]


def write_coverage_table(results, path) -> None:
    """One row per scenario, one coverage column per method."""
    results = list(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*SCENARIO_HEADER, "M", "B", "level", *(m.upper() for m in METHOD_ORDER)])
        for r in results:
            w.writerow([*_scenario_cols(r.scenario), r.M, r.B, r.settings["level"], *(r.rates.get(m, "") for m in METHOD_ORDER)])


def write_size_table(results, path) -> None:
    """One row per scenario and approach, one rejection column per method."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*SCENARIO_HEADER, "approach", "M", "B", "alpha", *(m.upper() for m in METHOD_ORDER)])
        for r in results:
            for a, rates in r.rates.items():
                w.writerow([*_scenario_cols(r.scenario), a, r.M, r.B, r.settings["alpha"], *(rates.get(m, "") for m in METHOD_ORDER)])


def write_se_table(result: StudyResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "method", "mc_sd", "mean_se", "bias_pct", "q05", "q25", "q50", "q75", "q95", "M"])
        for r in result.per_replicate:
            q = r["se_quantiles"]
            w.writerow([r["lam"], r["method"], r["mc_sd"], r["mean_se"], r["bias_pct"], q["q05"], q["q25"], q["q50"], q["q75"], q["q95"], r["M"]])
