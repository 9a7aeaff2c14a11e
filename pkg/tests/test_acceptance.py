"""End-to-end acceptance checks.

Each test prints one ``acceptance <n>: PASS|FAIL`` line with the measured
quantities, then asserts.  The Monte Carlo checks run at desk scale and take
several minutes each on one core; select them with ``-m acceptance``.
"""

import itertools
import math
import time
import warnings

import numpy as np
import pytest
from scipy import stats

from panelqr import simulation as sim
from panelqr.data import PanelData, ValidationError
from panelqr.resampling import ReplicateSpec, WeightScheme, default_workers, run_bootstrap, verify_weight_conditions
from panelqr.simulation import EngineConfig, Scenario
from panelqr.solver import FitConfig, RankDeficientError, check_rank, fit, lambda_upper_bound

import conftest
from oracles import vertex_enumeration

pytestmark = pytest.mark.acceptance

WORKERS = default_workers()


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nacceptance {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def quiet(fn, *a, **k):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*a, **k)


def test_criterion_1_solver_matches_vertex_enumeration(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    done = 0
    while done < 200:
        N, T, p = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 3))
        T_i = rng.integers(max(1, T - 2), T + 1, size=N)
        unit = np.repeat(np.arange(N), T_i)
        X = rng.normal(size=(unit.size, p))
        y = X @ rng.normal(size=p) + rng.normal(size=N)[unit] + rng.standard_t(3, size=unit.size)
        tau = float(rng.uniform(0.05, 0.95))
        lam = float(rng.choice([0.0, rng.uniform(0.0, 1.2 * lambda_upper_bound(tau, int(T_i.max())))]))
        try:
            data = PanelData.from_arrays(unit, y, X)
            check_rank(data, lam)
        except (ValidationError, RankDeficientError):
            continue  # slopes not identified; draw another instance
        done += 1
        got = quiet(fit, data, FitConfig(tau, lam)).objective
        want, _, _ = vertex_enumeration(y, X, unit, tau, lam)
        # interpolating instances have optimum 0; relative error is then taken on the data scale
        worst = max(worst, (got - want) / max(abs(want), 1e-6 * np.abs(y).sum()))
    elapsed = time.perf_counter() - t0
    ok = report(1, worst <= 1e-6 and elapsed < 60, f"200 instances, worst relative excess {worst:.2e}, {elapsed:.1f}s")
    assert ok


def _zero_is_unit_optimal(data, res, tau, lam):
    # one-sided derivatives of each unit's objective in its intercept, at zero;
    # residuals within solver tolerance of zero count as interpolated
    tol = 1e-7 * (1 + np.abs(data.response).max())
    for r in np.split(res.residuals, data.starts[1:-1]):
        right = np.sum(np.where(r > tol, -tau, 1 - tau)) + lam
        left = np.sum(np.where(r >= -tol, tau, tau - 1)) + lam
        if right < -1e-9 or left < -1e-9:
            return False
    return True


def test_criterion_2_upper_bound_zeroes_intercepts(report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    zero_ok, nonzero, explained, combos = True, 0, 0, 0
    for k in range(50):
        # a unit can only sit wholly beyond the pooled fit when N tau >= 1
        N, T = int(rng.integers(20, 41)), int(rng.integers(3, 10))
        unbalanced = k % 2 == 1
        T_i = rng.integers(2, T + 1, size=N) if unbalanced else np.full(N, T)
        unit = np.repeat(np.arange(N), T_i)
        a = 5.0 * rng.normal(size=N)
        X = rng.normal(size=(unit.size, 1)) + 0.2 * a[unit, None]
        y = X[:, 0] + a[unit] + rng.normal(size=unit.size)
        data = PanelData.from_arrays(unit, y, X)
        for tau in (0.1, 0.25, 0.5, 0.75, 0.9):
            lam_u = lambda_upper_bound(tau, data.max_T)
            eps = 1e-6 * lam_u
            zero_ok &= bool(np.all(fit(data, FitConfig(tau, lam_u + eps)).alpha == 0.0))
            if not unbalanced:
                combos += 1
                below = fit(data, FitConfig(tau, lam_u - eps))
                if below.active_count > 0:
                    nonzero += 1
                elif _zero_is_unit_optimal(data, below, tau, lam_u - eps):
                    # no unit lies wholly beyond the pooled fit, so zero intercepts are optimal
                    explained += 1
    elapsed = time.perf_counter() - t0
    ok = zero_ok and nonzero + explained == combos and elapsed < 60
    report(
        2,
        ok,
        f"above bound all zero: {zero_ok}; below bound nonzero in {nonzero}/{combos} balanced cases, "
        f"{explained} with zero verified optimal unit by unit; {elapsed:.1f}s",
    )
    assert ok


def test_criterion_4_weight_conditions(report):
    taus = (0.125, 0.25, 0.5, 0.75, 0.875)
    failed = []
    for kind, tau in itertools.product(("twopoint", "he"), taus):
        rep = verify_weight_conditions(WeightScheme(kind, tau))
        if not rep.passed:
            failed.append(f"{kind}@{tau}: " + ", ".join(c.name for c in rep.checks if not c.passed))
    swapped_fail = all(not verify_weight_conditions(WeightScheme("twopoint", t, swapped_masses=True)).passed for t in taus if t != 0.5)
    swapped_half = verify_weight_conditions(WeightScheme("twopoint", 0.5, swapped_masses=True)).passed
    ok = not failed and swapped_fail and swapped_half
    detail = "corrected schemes all pass" if not failed else "failing: " + "; ".join(failed)
    report(4, ok, f"{detail}; swapped masses fail off 0.5: {swapped_fail}")
    assert ok


TABLE_SCENARIO = Scenario(N=100, T=10, tau=0.5, zeta=0.0, error_law="normal", alpha_mode="gaussian", seed=2024)


@pytest.fixture(scope="module")
def table_run():
    cfg = EngineConfig(M=300, B=200, methods=("pairs", "wb1", "wb2"))
    return sim.run_engine(TABLE_SCENARIO, cfg, workers=WORKERS)


def test_criterion_5_coverage(table_run, report):
    res = sim.coverage_from_run(table_run, 0.90)
    wb1, pb = res.rates["wb1"], res.rates["pairs"]
    ok = 0.857 <= wb1 <= 0.961 and pb < 0.80
    report(
        5,
        ok,
        f"WB1 {wb1:.3f} (band [0.857, 0.961]), WB2 {res.rates['wb2']:.3f}, PB {pb:.3f} (< 0.80); "
        f"M={res.M}, B={res.B}, {table_run.runtime / 60:.1f} min with {WORKERS} worker(s)",
    )
    assert ok


def test_criterion_6_size(table_run, report):
    res = sim.size_from_run(table_run, 0.05)
    cv, se = res.rates["critical_values"], res.rates["standard_errors"]
    ok = 0.005 <= cv["wb1"] <= 0.10 and 0.005 <= se["wb1"] <= 0.10 and cv["pairs"] < 0.02
    report(
        6,
        ok,
        f"WB1 critical values {cv['wb1']:.3f}, WB1 standard errors {se['wb1']:.3f} (band [0.005, 0.10]); "
        f"PB critical values {cv['pairs']:.3f} (< 0.02); WB2 {cv['wb2']:.3f}/{se['wb2']:.3f}",
    )
    assert ok


def test_criterion_7_standard_errors(report):
    scenario = Scenario(N=100, T=10, tau=0.5, zeta=0.5, error_law="normal", alpha_mode="gaussian", seed=7)
    res = sim.run_se_study(scenario, M=200, B=200, lambda_grid=(0.01, 0.06, 0.2), methods=("wb1",), workers=WORKERS)
    rows = {r["lam"]: r for r in res.per_replicate}
    mid = rows[0.06]
    rel = abs(mid["mean_se"] - mid["mc_sd"]) / mid["mc_sd"]
    biases = [rows[lam]["bias_pct"] for lam in (0.01, 0.06, 0.2)]
    spread = max(biases) - min(biases)
    ok = rel < 0.15 and abs(mid["mc_sd"] - 0.081) <= 0.25 * 0.081 and spread < 10.0
    report(
        7,
        ok,
        f"lambda 0.06: MC sd {mid['mc_sd']:.4f} (0.081 +/- 25%), mean WB1 se {mid['mean_se']:.4f}, "
        f"relative gap {rel:.3f} (< 0.15); bias % by lambda {', '.join(f'{b:.1f}' for b in biases)}, "
        f"spread {spread:.1f} pp (< 10); {res.runtime / 60:.1f} min",
    )
    assert ok


def test_criterion_8_bootstrap_distribution(report):
    scenario = Scenario(N=50, T=20, tau=0.5, seed=8)
    run = sim.run_engine(scenario, EngineConfig(M=300, B=200, methods=("wb1",)), workers=WORKERS)
    mc = np.array([r["scale"] * (r["beta_hat"][0] - r["beta0"]) for r in run.records])
    boot = np.concatenate([run.boot(r, "wb1").centered()[:, 0] for r in run.records])
    ks = stats.ks_2samp(mc, boot).statistic
    ok = ks < 0.12
    report(8, ok, f"KS distance {ks:.3f} (< 0.12) between {mc.size} estimates and {boot.size} pooled draws")
    assert ok


def test_criterion_9_determinism_across_workers(report, panel):
    base = fit(panel, FitConfig(0.5, 0.4))
    same = True
    for method in ("wb1", "wb2", "pairs"):
        spec = ReplicateSpec(method, WeightScheme("twopoint", 0.5))
        csvs = [quiet(run_bootstrap, panel, base, spec, FitConfig(0.5, 0.4), 120, 77, workers=w).draws_csv() for w in (1, 2, 4)]
        same &= csvs[0] == csvs[1] == csvs[2]
    one = quiet(run_bootstrap, panel, base, ReplicateSpec("wb1", WeightScheme("twopoint", 0.5)), FitConfig(0.5, 0.4), 1, 5, workers=1)
    eight = quiet(run_bootstrap, panel, base, ReplicateSpec("wb1", WeightScheme("twopoint", 0.5)), FitConfig(0.5, 0.4), 1, 5, workers=8)
    same &= one.draws_csv() == eight.draws_csv()
    scenario = Scenario(N=15, T=5, seed=9)
    cfg = EngineConfig(M=4, B=20, methods=("pairs", "wb1", "wb2"))
    runs = [sim.run_engine(scenario, cfg, workers=w, use_cache=False) for w in (1, 3)]
    sim_same = [r["methods"] for r in runs[0].records] == [r["methods"] for r in runs[1].records]
    ok = same and sim_same
    report(9, ok, f"bootstrap draws CSV identical across workers 1/2/4/8: {same}; simulation draws identical across workers 1/3: {sim_same}")
    assert ok


def test_criterion_3_certificates(report):
    # broad sweep over quantile levels, penalties and panel shapes
    rng = np.random.default_rng(303)
    done = 0
    while done < 150:
        N, T, p = int(rng.integers(1, 30)), int(rng.integers(2, 12)), int(rng.integers(1, 4))
        d = conftest.make_panel(rng, N=N, T=T, p=p, unbalanced=bool(rng.integers(2)), spread=float(rng.uniform(0, 4)))
        tau = float(rng.uniform(0.02, 0.98))
        lam = float(rng.choice([0.0, rng.uniform(0, 1.2) * lambda_upper_bound(tau, d.max_T)]))
        try:
            check_rank(d, lam)
        except RankDeficientError:
            continue
        done += 1
        quiet(fit, d, FitConfig(tau, lam))
    certs = conftest.CERTIFICATES
    general = [c for c in certs if c[0]]
    bad = [c for c in general if not c[1]]
    ok = not bad
    report(3, ok, f"{len(certs)} fits certified so far ({len(general)} in general position), {len(bad)} failures")
    assert ok, bad[:3]
