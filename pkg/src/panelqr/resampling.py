"""Wild residual bootstrap and pairs block bootstrap for the penalized fit.

Randomness is organized per replicate: replicate ``b`` of a run seeded with
``seed`` draws everything from ``SeedSequence(seed, spawn_key=(b,))``.
Replicates are solved in fixed chunks of :data:`CHUNK` consecutive indices,
whatever the number of workers, so the draws are bit-identical for any
worker count.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import _ipm, solver
from .data import PanelData
from .inference import BootstrapResult
from .solver import FitConfig, FitResult, SolverError, fit, fixed_units

log = logging.getLogger(__name__)

CHUNK = 50
MAX_FAILURE_RATE = 0.05
PAIRS_MAX_RETRIES = 10
HE_HALF_WIDTH = 0.25


class WeightConfigError(ValueError):
    pass


class BootstrapError(RuntimeError):
    """Too many replicates failed."""

    def __init__(self, message, failure_log=()):
        super().__init__(message)
        self.failure_log = list(failure_log)


@dataclass(frozen=True)
class WeightScheme:
    """Wild-bootstrap weight law with tau-quantile zero.

    ``twopoint``: ``-2 tau`` with probability ``tau`` and ``2 (1 - tau)`` with
    probability ``1 - tau``.  ``swapped_masses=True`` swaps the two masses; that
    variant violates the quantile-zero and inverse-moment conditions for
    ``tau != 0.5`` and exists only so the check can be reproduced.

    ``he``: density ``-w`` on ``[-2 tau - 1/4, -2 tau + 1/4]`` plus ``w`` on
    ``[2 (1 - tau) - 1/4, 2 (1 - tau) + 1/4]``, defined for
    ``1/8 <= tau <= 7/8``.
    """

    kind: str = "twopoint"
    tau: float = 0.5
    swapped_masses: bool = False

    def __post_init__(self):
        if self.kind not in ("twopoint", "he"):
            raise WeightConfigError(f"unknown weight scheme {self.kind!r}")
        if not 0.0 < self.tau < 1.0:
            raise WeightConfigError("tau must lie in (0, 1)")
        if self.kind == "he" and not (0.125 <= self.tau <= 0.875):
            raise WeightConfigError(f"the continuous scheme needs 1/8 <= tau <= 7/8, got tau={self.tau}")
        if self.swapped_masses and self.kind != "twopoint":
            raise WeightConfigError("swapped_masses applies only to the two-point scheme")

    @property
    def negative_mass(self) -> float:
        if self.kind == "twopoint" and self.swapped_masses:
            return 1.0 - self.tau
        return self.tau

    def pieces(self):
        """``((lo, hi) negative piece, (lo, hi) positive piece)``."""
        a, b = -2.0 * self.tau, 2.0 * (1.0 - self.tau)
        if self.kind == "twopoint":
            return (a, a), (b, b)
        h = HE_HALF_WIDTH
        return (a - h, a + h), (b - h, b + h)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        """Draw ``size`` weights; two uniforms per weight for the continuous law."""
        (nl, nh), (pl, ph) = self.pieces()
        u = rng.random(size)
        neg = u < self.negative_mass
        if self.kind == "twopoint":
            return np.where(neg, nl, pl)
        v = rng.random(size)
        # inverse CDF within each piece (densities -w and w)
        left = -np.sqrt(nl**2 - v * (nl**2 - nh**2))
        right = np.sqrt(pl**2 + v * (ph**2 - pl**2))
        return np.where(neg, left, right)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tau": self.tau, "swapped_masses": self.swapped_masses}


def sample_weight(scheme: WeightScheme, rng: np.random.Generator) -> float:
    return float(scheme.sample(rng, 1)[0])


@dataclass
class ConditionCheck:
    name: str
    value: object
    target: object
    passed: bool


@dataclass
class WeightReport:
    scheme: WeightScheme
    checks: list[ConditionCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "passed": self.passed,
            "checks": [c.__dict__ for c in self.checks],
        }

    def table(self) -> str:
        lines = [f"{'condition':<24}{'value':<30}{'target':<18}status"]
        for c in self.checks:
            lines.append(f"{c.name:<24}{str(c.value):<30}{str(c.target):<18}{'pass' if c.passed else 'FAIL'}")
        return "\n".join(lines)


def verify_weight_conditions(scheme: WeightScheme, atol: float = 1e-12) -> WeightReport:
    """Closed-form check of the three weight conditions.

    * quantile: ``G(0) = tau``;
    * support gap: no mass in ``(-c1, c2)`` for some ``c1, c2 > 0``;
    * inverse moments: ``-int_{w<0} dG/w = int_{w>0} dG/w = 1/2``.
    """
    tau = scheme.tau
    (nl, nh), (pl, ph) = scheme.pieces()
    if scheme.kind == "twopoint":
        m_neg = scheme.negative_mass
        m_pos = 1.0 - m_neg
        inv_neg = m_neg / abs(nl)
        inv_pos = m_pos / pl
    else:
        # mass of density -w on [nl, nh] is (nl^2 - nh^2)/2; int (1/w)(-w) dw is the length
        m_neg = (nl**2 - nh**2) / 2.0
        m_pos = (ph**2 - pl**2) / 2.0
        inv_neg = nh - nl
        inv_pos = ph - pl
    c1, c2 = -nh, pl
    checks = [
        ConditionCheck("quantile G(0)=tau", m_neg, tau, abs(m_neg - tau) <= atol),
        ConditionCheck("support gap c1,c2>0", [c1, c2], "> 0", c1 > atol and c2 > atol),
        ConditionCheck("inverse moment (w<0)", inv_neg, 0.5, abs(inv_neg - 0.5) <= atol),
        ConditionCheck("inverse moment (w>0)", inv_pos, 0.5, abs(inv_pos - 0.5) <= atol),
    ]
    return WeightReport(scheme, checks)


@dataclass(frozen=True)
class ReplicateSpec:
    """What one bootstrap replicate does.

    ``a_T=None`` selects ``sqrt(log N / mean T)`` for the thresholded wild
    bootstrap; ``refit_lambda=None`` reuses the penalty of the base fit.
    ``adjust_residuals`` inflates ``|u|`` by ``sqrt(n / (n - p - |S|))``.
    """

    method: str = "wb1"
    weight: WeightScheme = WeightScheme()
    a_T: float | None = None
    adjust_residuals: bool = False
    refit_lambda: float | None = None

    def __post_init__(self):
        m = self.method.lower()
        aliases = {"wb1": "wb1", "wb2": "wb2", "pairs": "pairs", "pb": "pairs", "pairsblock": "pairs"}
        if m not in aliases:
            raise ValueError(f"unknown bootstrap method {self.method!r}")
        object.__setattr__(self, "method", aliases[m])
        if self.a_T is not None and self.a_T < 0:
            raise ValueError("a_T must be nonnegative")
        if self.refit_lambda is not None and self.refit_lambda < 0:
            raise ValueError("refit_lambda must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "weight": self.weight.to_dict(),
            "a_T": self.a_T,
            "adjust_residuals": self.adjust_residuals,
            "refit_lambda": self.refit_lambda,
        }


def default_a_T(data: PanelData) -> float:
    return math.sqrt(math.log(data.n_units) / data.mean_T) if data.n_units > 1 else 0.0


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def _refit_config(base: FitResult, spec: ReplicateSpec, config: FitConfig) -> FitConfig:
    lam = base.lam if spec.refit_lambda is None else spec.refit_lambda
    return replace(config, lam=float(lam))


def wild_components(data: PanelData, base: FitResult, spec: ReplicateSpec):
    """Fitted values and residual magnitudes the wild bootstrap perturbs."""
    alpha = base.alpha
    if spec.method == "wb2":
        a_T = default_a_T(data) if spec.a_T is None else spec.a_T
        alpha = np.where(np.abs(alpha) >= a_T, alpha, 0.0)
    fitted = data.covariates @ base.beta + np.repeat(alpha, data.obs_per_unit)
    mag = np.abs(data.response - fitted)
    if spec.adjust_residuals:
        n = data.n_obs
        df = data.n_features + base.active_count
        if df < n:
            mag = mag * math.sqrt(n / (n - df))
    return fitted, mag


def _wild_response(fitted, mag, spec, rng):
    return fitted + spec.weight.sample(rng, fitted.size) * mag


def wb1_replicate(data: PanelData, base: FitResult, spec: ReplicateSpec, config: FitConfig, rng) -> FitResult:
    """Refit on ``y* = x'b + a_i + w |u|`` with the base fit's intercepts."""
    if spec.method != "wb1":
        raise ValueError("spec.method must be wb1")
    fitted, mag = wild_components(data, base, spec)
    return fit(data.with_response(_wild_response(fitted, mag, spec, rng)), _refit_config(base, spec, config), check=False)


def wb2_replicate(data: PanelData, base: FitResult, spec: ReplicateSpec, config: FitConfig, rng) -> FitResult:
    """Refit on ``y** = x'b + a**_i + w |v|`` with intercepts thresholded at ``a_T``."""
    if spec.method != "wb2":
        raise ValueError("spec.method must be wb2")
    fitted, mag = wild_components(data, base, spec)
    return fit(data.with_response(_wild_response(fitted, mag, spec, rng)), _refit_config(base, spec, config), check=False)


def draw_units(n_units: int, rng) -> np.ndarray:
    """Unit indices with replacement, redrawn while all picks coincide (N > 1)."""
    for _ in range(PAIRS_MAX_RETRIES + 1):
        idx = rng.integers(0, n_units, size=n_units)
        if n_units == 1 or np.unique(idx).size > 1:
            return idx
    raise BootstrapError(f"pairs resample degenerate after {PAIRS_MAX_RETRIES} retries")


def resampled_panel(data: PanelData, idx) -> PanelData:
    """Panel made of the drawn unit blocks, each draw its own unit.

    Giving every copy its own intercept and penalty term is equivalent to
    weighting unit ``i``'s loss and penalty by its draw count ``n_i*``; units
    not drawn drop out.
    """
    st = data.starts
    rows = np.concatenate([np.arange(st[i], st[i + 1]) for i in idx])
    return PanelData(
        unit_ids=tuple(range(len(idx))),
        obs_per_unit=data.obs_per_unit[idx],
        response=data.response[rows],
        covariates=data.covariates[rows],
        covariate_names=data.covariate_names,
    )


def pairs_replicate(data: PanelData, spec: ReplicateSpec, config: FitConfig, rng) -> FitResult:
    """Refit on a with-replacement resample of whole units."""
    if spec.method != "pairs":
        raise ValueError("spec.method must be pairs")
    idx = draw_units(data.n_units, rng)
    cfg = config if spec.refit_lambda is None else replace(config, lam=float(spec.refit_lambda))
    return fit(resampled_panel(data, idx), cfg)


# batched execution -------------------------------------------------------


@dataclass
class _Task:
    data: PanelData
    base_beta: np.ndarray
    fitted: np.ndarray | None
    mag: np.ndarray | None
    spec: ReplicateSpec
    config: FitConfig
    seed: int


def _solve_chunk(task: _Task, indices):
    """Solve replicates ``indices``; returns betas (NaN on failure) and messages."""
    data, cfg, spec = task.data, task.config, task.spec
    p = data.n_features
    R = len(indices)
    betas = np.full((R, p), np.nan)
    msgs = {}
    cert_fail = 0
    if spec.method == "pairs":
        picks = []
        for k, b in enumerate(indices):
            try:
                picks.append(draw_units(data.n_units, replicate_rng(task.seed, b)))
            except BootstrapError as e:
                picks.append(None)
                msgs[k] = str(e)
        panels = [None if ix is None else resampled_panel(data, ix) for ix in picks]
    else:
        ys = np.stack([_wild_response(task.fitted, task.mag, spec, replicate_rng(task.seed, b)) for b in indices])
        panels = [data.with_response(y) for y in ys]

    ok = [k for k in range(R) if panels[k] is not None]
    fixed = fixed_units(data, cfg)
    balanced = bool(np.all(data.obs_per_unit == data.obs_per_unit[0]))
    sol = None
    if ok and (spec.method != "pairs" or balanced):
        try:
            if spec.method == "pairs":
                X = np.stack([panels[k].covariates for k in ok])
            else:
                X = data.covariates
            sol = _ipm.solve_batch(
                X,
                data.starts,
                np.stack([panels[k].response for k in ok]),
                cfg.lam,
                cfg.tau,
                free=~fixed[None, :],
                tol=cfg.tol,
                max_iter=cfg.max_iter,
            )
        except (np.linalg.LinAlgError, FloatingPointError, SolverError) as e:
            log.debug("batched solve failed (%s); solving replicates one by one", e)
            sol = None
    for pos, k in enumerate(ok):
        try:
            if sol is not None:
                if not sol.converged[pos]:
                    raise SolverError(f"no convergence, relative gap {sol.gap[pos]:.3g}")
                res = solver._finish(panels[k], cfg, sol.beta[pos], sol.alpha[pos], iterations=sol.iterations[pos])
            else:
                res = fit(panels[k], cfg, check=False)
            betas[k] = res.beta
            if not res.certificate.passed:
                cert_fail += 1
        except (SolverError, np.linalg.LinAlgError, ValueError) as e:
            msgs[k] = f"{type(e).__name__}: {e}"
    return betas, {indices[k]: m for k, m in msgs.items()}, cert_fail


def _run_chunk(args):
    task, indices = args
    return _solve_chunk(task, indices)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_bootstrap(
    data: PanelData,
    base: FitResult,
    spec: ReplicateSpec,
    config: FitConfig,
    B: int,
    seed: int,
    workers: int = 1,
) -> BootstrapResult:
    """Run ``B`` replicates and collect the slope draws.

    Draw ``b`` depends only on ``(data, base, spec, config, seed, b)``.  The
    run fails with :class:`BootstrapError` when more than 5% of replicates
    fail; otherwise failed indices are reported and left out of ``draws``.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    if spec.method in ("wb1", "wb2"):
        fitted, mag = wild_components(data, base, spec)
        cfg = _refit_config(base, spec, config)
    else:
        fitted = mag = None
        cfg = config if spec.refit_lambda is None else replace(config, lam=float(spec.refit_lambda))
    task = _Task(data, base.beta, fitted, mag, spec, cfg, int(seed))
    chunks = [list(range(s, min(s + CHUNK, B))) for s in range(0, B, CHUNK)]
    workers = max(1, int(workers or 1))
    if workers == 1 or len(chunks) == 1:
        results = [_solve_chunk(task, c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(chunks))) as ex:
            results = list(ex.map(_run_chunk, [(task, c) for c in chunks]))
    betas = np.concatenate([r[0] for r in results], axis=0)
    failures = {}
    for r in results:
        failures.update(r[1])
    cert_fail = sum(r[2] for r in results)
    failed = sorted(failures)
    flog = [f"replicate {b}: {failures[b]}" for b in failed]
    if len(failed) > MAX_FAILURE_RATE * B:
        raise BootstrapError(f"{len(failed)} of {B} bootstrap replicates failed", flog)
    keep = np.ones(B, dtype=bool)
    keep[failed] = False
    meta = {
        "spec": spec.to_dict(),
        "tau": cfg.tau,
        "certificate_failures": cert_fail,
        "chunk": CHUNK,
    }
    if spec.method == "wb2":
        meta["a_T"] = default_a_T(data) if spec.a_T is None else spec.a_T
    if spec.adjust_residuals:
        meta["residual_adjustment"] = "sqrt(n / (n - p - |S|)) inflation; reconstruction of an unspecified correction"
    return BootstrapResult(
        draws=betas[keep],
        method=spec.method,
        B=B,
        seed=int(seed),
        base_beta=base.beta,
        scale=math.sqrt(data.n_obs),
        lam=cfg.lam,
        failures=failed,
        failure_log=flog,
        metadata=meta,
    )
