"""Intervals, covariance and tests built from bootstrap slope draws.

All bootstrap quantities are on the ``sqrt(n)`` scale, ``n`` being the total
number of observations: ``G_j`` is the distribution of
``sqrt(n) (beta*_j - beta_hat_j)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


class DegenerateBootstrapError(ValueError):
    """Bootstrap spread is zero or the covariance is singular."""


@dataclass
class BootstrapResult:
    """Slope draws from one bootstrap run.

    ``draws`` holds the successful replicates in replicate-index order;
    ``failures`` lists the indices that did not produce a draw.
    """

    draws: np.ndarray
    method: str
    B: int
    seed: int | None
    base_beta: np.ndarray
    scale: float
    lam: float
    failures: list[int] = field(default_factory=list)
    failure_log: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=np.float64))
        self.base_beta = np.asarray(self.base_beta, dtype=np.float64).reshape(-1)
        if self.draws.shape[0] < 1:
            raise ValueError("bootstrap result needs at least one draw")
        if self.draws.shape[1] != self.base_beta.size:
            raise ValueError("draws and base_beta disagree on the number of coefficients")
        if not np.all(np.isfinite(self.draws)):
            raise ValueError("draws must be finite")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def centered(self) -> np.ndarray:
        """``scale * (draws - base_beta)``."""
        return self.scale * (self.draws - self.base_beta)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "B": self.B,
            "seed": self.seed,
            "lambda": self.lam,
            "scale": self.scale,
            "base_beta": self.base_beta.tolist(),
            "draws": self.draws.tolist(),
            "failures": list(self.failures),
            "failure_log": list(self.failure_log),
            "metadata": self.metadata,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> BootstrapResult:
        return cls(
            draws=np.asarray(d["draws"], dtype=np.float64),
            method=d["method"],
            B=d["B"],
            seed=d["seed"],
            base_beta=np.asarray(d["base_beta"], dtype=np.float64),
            scale=d["scale"],
            lam=d["lambda"],
            failures=list(d.get("failures", [])),
            failure_log=list(d.get("failure_log", [])),
            metadata=dict(d.get("metadata", {})),
        )

    def draws_csv(self, names=None) -> str:
        """Draws as CSV text with round-trip float formatting."""
        p = self.draws.shape[1]
        names = list(names) if names is not None else [f"beta{j + 1}" for j in range(p)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for row in self.draws:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def write_draws(self, path, names=None) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.draws_csv(names))


@dataclass
class CovarianceEstimate:
    omega_star: np.ndarray
    se: np.ndarray
    n_obs: int
    centering: str = "estimate"


@dataclass
class TestReport:
    coef: int | list
    estimate: float | list
    se: float | None
    ci_low: float | None
    ci_high: float | None
    stat: float
    critical_value: float | None
    p_value: float | None
    reject: bool
    method: str
    B: int | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, np.generic):
                return v.item()
            return v

        return {k: clean(v) for k, v in self.__dict__.items()}


def _order_stat_quantiles(g: np.ndarray, q: float):
    """Lower ``ceil(Bq)``-th order statistic and upper ``ceil(Bq)``-th from the top."""
    B = g.shape[0]
    k = max(1, math.ceil(B * q - 1e-9))
    s = np.sort(g, axis=0)
    return s[k - 1], s[B - k]


def bootstrap_quantiles(boot: BootstrapResult, level: float):
    """``(G(alpha/2), G(1 - alpha/2))`` per coefficient with ``alpha = 1 - level``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if boot.n_draws < 20:
        raise ValueError(f"need at least 20 draws, got {boot.n_draws}")
    if boot.n_draws < 200:
        warnings.warn(f"only {boot.n_draws} bootstrap draws; tail quantiles are coarse", stacklevel=3)
    return _order_stat_quantiles(boot.centered(), (1.0 - level) / 2.0)


def percentile_ci(boot: BootstrapResult, level: float = 0.90):
    """Intervals ``[b_j - G_j(1 - a/2) / s, b_j - G_j(a/2) / s]``.

    Returns ``(low, high)`` arrays of length p.
    """
    g_lo, g_hi = bootstrap_quantiles(boot, level)
    return boot.base_beta - g_hi / boot.scale, boot.base_beta - g_lo / boot.scale


def bootstrap_covariance(boot: BootstrapResult, centering: str = "estimate") -> CovarianceEstimate:
    """``Omega* = mean_b scale^2 (beta*_b - c)(beta*_b - c)'``.

    ``centering="estimate"`` uses ``c = beta_hat``; ``"mean"`` uses the draw
    mean (a diagnostic variant).
    """
    if boot.n_draws < 2:
        raise ValueError("need at least 2 draws")
    if centering == "estimate":
        c = boot.base_beta
    elif centering == "mean":
        c = boot.draws.mean(axis=0)
    else:
        raise ValueError(f"unknown centering {centering!r}")
    d = boot.scale * (boot.draws - c)
    omega = d.T @ d / boot.n_draws
    omega = 0.5 * (omega + omega.T)
    n = boot.scale**2
    return CovarianceEstimate(omega, np.sqrt(np.diag(omega) / n), int(round(n)), centering)


def _estimate(fit_or_beta):
    return np.asarray(getattr(fit_or_beta, "beta", fit_or_beta), dtype=np.float64).reshape(-1)


def bootstrap_t_test(fit, cov: CovarianceEstimate, j: int, beta0: float, alpha: float = 0.05) -> TestReport:
    """Two-sided test of ``beta_j = beta0`` using ``|b_j - beta0| / se_j`` against the normal."""
    b = _estimate(fit)[j]
    se = float(cov.se[j])
    if not se > 0:
        raise DegenerateBootstrapError(f"bootstrap standard error of coefficient {j} is zero")
    stat = abs(b - beta0) / se
    crit = stats.norm.ppf(1.0 - alpha / 2.0)
    p = 2.0 * stats.norm.sf(stat)
    return TestReport(
        coef=j,
        estimate=float(b),
        se=se,
        ci_low=float(b - crit * se),
        ci_high=float(b + crit * se),
        stat=float(stat),
        critical_value=float(crit),
        p_value=float(p),
        reject=bool(stat > crit),
        method="bootstrap-t",
    )


def critical_value_test(fit, boot: BootstrapResult, j: int, beta0: float, alpha: float = 0.05) -> TestReport:
    """Reject when ``scale (b_j - beta0)`` falls outside ``[G_j(a/2), G_j(1 - a/2)]``."""
    b = _estimate(fit)[j]
    g_lo, g_hi = bootstrap_quantiles(boot, 1.0 - alpha)
    t = boot.scale * (b - beta0)
    g = boot.centered()[:, j]
    # two-sided bootstrap p-value by tail counts
    p = min(1.0, 2.0 * min(np.mean(g >= t), np.mean(g <= t)))
    return TestReport(
        coef=j,
        estimate=float(b),
        se=None,
        ci_low=float(b - g_hi[j] / boot.scale),
        ci_high=float(b - g_lo[j] / boot.scale),
        stat=float(t),
        critical_value=None,
        p_value=float(p),
        reject=bool(t < g_lo[j] or t > g_hi[j]),
        method="critical-values",
        B=boot.B,
        seed=boot.seed,
    )


def wald_test(fit, cov: CovarianceEstimate, R, r=None) -> TestReport:
    """``W = (Rb - r)' [R (Omega*/n) R']^{-1} (Rb - r)`` against chi-square(q)."""
    b = _estimate(fit)
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    q = R.shape[0]
    r = np.zeros(q) if r is None else np.asarray(r, dtype=np.float64).reshape(-1)
    if R.shape[1] != b.size or r.size != q:
        raise ValueError("contrast dimensions do not match the coefficient vector")
    if np.linalg.matrix_rank(R) < q:
        raise ValueError("contrast matrix must have full row rank")
    M = R @ (cov.omega_star / cov.n_obs) @ R.T
    if np.linalg.matrix_rank(M) < q or not np.all(np.isfinite(M)):
        raise DegenerateBootstrapError("covariance of the contrasts is singular; increase the number of draws")
    d = R @ b - r
    W = float(d @ np.linalg.solve(M, d))
    p = float(stats.chi2.sf(W, q))
    return TestReport(
        coef=list(range(q)),
        estimate=(R @ b).tolist(),
        se=None,
        ci_low=None,
        ci_high=None,
        stat=W,
        critical_value=float(stats.chi2.ppf(0.95, q)),
        p_value=p,
        reject=bool(p < 0.05),
        method="wald",
    )


def inference_report(fit, boot: BootstrapResult, level: float = 0.90, names=None) -> list[dict]:
    """Per-coefficient estimate, standard error and percentile interval."""
    b = _estimate(fit)
    lo, hi = percentile_ci(boot, level)
    cov = bootstrap_covariance(boot)
    rows = []
    for j in range(b.size):
        se = float(cov.se[j])
        stat = abs(b[j]) / se if se > 0 else math.inf
        rows.append(
            {
                "coef": names[j] if names else j,
                "estimate": float(b[j]),
                "se": se,
                "ci_low": float(lo[j]),
                "ci_high": float(hi[j]),
                "stat": float(stat),
                "p_value": float(2.0 * stats.norm.sf(stat)),
                "method": boot.method,
                "B": boot.B,
                "seed": boot.seed,
            }
        )
    return rows
