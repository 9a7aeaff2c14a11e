"""Penalized fixed-effects quantile regression.

Minimizes

    sum_it rho_tau(y_it - x_it'beta - alpha_i) + lam * sum_i |alpha_i|

over (beta, alpha) and certifies the solution with the score bounds that any
basic optimal solution of the augmented linear program satisfies.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import _ipm
from .data import PanelData

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
ACTIVE_REL_THRESHOLD = 1e-6
TIE_SLACK = 2.0


class SolverError(RuntimeError):
    """Interior point did not reach the requested duality gap."""

    def __init__(self, message, beta=None, alpha=None, gap=None):
        super().__init__(message)
        self.beta = beta
        self.alpha = alpha
        self.gap = gap


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    tau: float
    lam: float = 0.0
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.lam >= 0.0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not self.tol > 0.0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class OptimalityCertificate:
    global_score_norm: float
    per_unit_scores: np.ndarray
    total_score: float
    global_bound: float
    per_unit_bounds: np.ndarray
    total_bound: float
    general_position: bool = True
    slack: float = 1.0

    @property
    def global_ok(self) -> bool:
        return self.global_score_norm <= self.slack * self.global_bound * (1 + 1e-9) + 1e-9

    @property
    def per_unit_ok(self) -> bool:
        return bool(np.all(self.per_unit_scores <= self.slack * self.per_unit_bounds * (1 + 1e-9) + 1e-9))

    @property
    def total_ok(self) -> bool:
        return self.total_score <= self.slack * self.total_bound * (1 + 1e-9) + 1e-9

    @property
    def passed(self) -> bool:
        return self.global_ok and self.per_unit_ok and self.total_ok

    def to_dict(self) -> dict:
        return {
            "global_score_norm": self.global_score_norm,
            "global_bound": self.global_bound,
            "max_per_unit_score": float(np.max(self.per_unit_scores)),
            "per_unit_bound_min": float(np.min(self.per_unit_bounds)),
            "per_unit_ok": self.per_unit_ok,
            "total_score": self.total_score,
            "total_bound": self.total_bound,
            "general_position": self.general_position,
            "slack": self.slack,
            "passed": self.passed,
        }


@dataclass
class FitResult:
    tau: float
    lam: float
    beta: np.ndarray
    alpha: np.ndarray
    residuals: np.ndarray
    objective: float
    active_set: np.ndarray
    certificate: OptimalityCertificate | None
    iterations: int
    converged: bool
    gap: float = 0.0
    warnings: list[str] = field(default_factory=list)

    @property
    def active_count(self) -> int:
        return int(self.active_set.size)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lambda": self.lam,
            "beta": self.beta.tolist(),
            "alpha": self.alpha.tolist(),
            "objective": self.objective,
            "active_count": self.active_count,
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "converged": self.converged,
            "iterations": self.iterations,
            "warnings": list(self.warnings),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def rho(u, tau):
    """Check loss ``max((tau - 1) u, tau u)``."""
    u = np.asarray(u, dtype=np.float64)
    out = np.maximum((tau - 1.0) * u, tau * u)
    return float(out) if out.ndim == 0 else out


def psi(u, tau):
    """Score of the check loss, right-continuous at zero (psi(0) = tau)."""
    u = np.asarray(u, dtype=np.float64)
    out = tau - (u < 0).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def lambda_upper_bound(tau: float, max_T: int) -> float:
    """Penalty beyond which every intercept is exactly zero."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if max_T < 1:
        raise ValueError("max_T must be at least 1")
    return max(tau, 1.0 - tau) * max_T


def _unit_weight_rows(data, unit_weights):
    if unit_weights is None:
        return None
    w = np.asarray(unit_weights, dtype=np.float64)
    if w.shape != (data.n_units,) or np.any(w <= 0):
        raise ValueError("unit_weights must be positive, one per unit")
    return np.repeat(w, data.obs_per_unit)


def objective(data: PanelData, config: FitConfig, beta, alpha, unit_weights=None) -> float:
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if beta.size != data.n_features:
        raise ValueError(f"beta has length {beta.size}, panel has {data.n_features} covariates")
    if alpha.size != data.n_units:
        raise ValueError(f"alpha has length {alpha.size}, panel has {data.n_units} units")
    r = data.response - data.covariates @ beta - np.repeat(alpha, data.obs_per_unit)
    if unit_weights is None:
        return float(rho(r, config.tau).sum() + config.lam * np.abs(alpha).sum())
    w = np.asarray(unit_weights, dtype=np.float64)
    return float((np.repeat(w, data.obs_per_unit) * rho(r, config.tau)).sum() + config.lam * (w * np.abs(alpha)).sum())


@dataclass
class LPInstance:
    """Augmented unpenalized problem: rows ``[X | unit dummies]`` over ``[0 | lam I]``.

    The data rows use the check loss; the penalty rows use the absolute value
    (equal positive and negative weights), so minimizing
    ``sum_k pos_k r_k^+ + neg_k r_k^-`` with ``r = response - design @ theta``
    reproduces the penalized objective.
    """

    design: sparse.csr_matrix
    response: np.ndarray
    pos_weight: np.ndarray
    neg_weight: np.ndarray
    n_data_rows: int

    def loss(self, theta) -> float:
        r = self.response - self.design @ np.asarray(theta, dtype=np.float64)
        return float(np.sum(self.pos_weight * np.maximum(r, 0) + self.neg_weight * np.maximum(-r, 0)))


def augment_design(data: PanelData, lam: float, tau: float = 0.5) -> LPInstance:
    n, N = data.n_obs, data.n_units
    D = sparse.csr_matrix((np.ones(n), (np.arange(n), data.unit_index)), shape=(n, N))
    top = sparse.hstack([sparse.csr_matrix(data.covariates), D])
    pos = np.full(n, tau)
    neg = np.full(n, 1.0 - tau)
    z = data.response.copy()
    if lam > 0:
        bottom = sparse.hstack([sparse.csr_matrix((N, data.n_features)), lam * sparse.identity(N)])
        top = sparse.vstack([top, bottom])
        pos = np.concatenate([pos, np.ones(N)])
        neg = np.concatenate([neg, np.ones(N)])
        z = np.concatenate([z, np.zeros(N)])
    return LPInstance(sparse.csr_matrix(top), z, pos, neg, n)


def activity_threshold(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    q75, q25 = np.percentile(y, [75, 25])
    scale = q75 - q25
    if scale <= 0:
        scale = np.max(np.abs(y)) or 1.0
    return ACTIVE_REL_THRESHOLD * scale


def _within_rank(data: PanelData) -> int:
    X = data.covariates
    if X.shape[1] == 0:
        return 0
    means = np.add.reduceat(X, data.starts[:-1], axis=0) / data.obs_per_unit[:, None]
    return int(np.linalg.matrix_rank(X - np.repeat(means, data.obs_per_unit, axis=0)))


def check_rank(data: PanelData, lam: float) -> None:
    p = data.n_features
    if p == 0:
        return
    if lam == 0:
        if _within_rank(data) < p:
            raise RankDeficientError(
                "covariates are collinear after removing unit means (time-invariant or "
                "collinear columns); remove covariates to identify the slopes"
            )
    elif np.linalg.matrix_rank(data.covariates) < p:
        raise RankDeficientError("covariate matrix is rank deficient; remove collinear covariates")


def _general_position(data: PanelData, residuals=None) -> bool:
    """False for tied observations or when more than p + N residuals vanish.

    A basic solution interpolates at most p + N observations when the data
    are in general position, so any excess of zero residuals signals
    degenerate data (for example an exact fit).
    """
    rows = np.column_stack([data.unit_index, data.covariates, data.response])
    if np.unique(rows, axis=0).shape[0] < rows.shape[0]:
        return False
    if np.unique(data.response).size < data.n_obs:
        return False
    if residuals is not None:
        zero = np.abs(residuals) <= 1e-7 * (1.0 + np.abs(data.response).max())
        if zero.sum() > data.n_features + data.n_units:
            return False
    return True


def check_optimality(data: PanelData, config: FitConfig, result: FitResult, unit_weights=None) -> OptimalityCertificate:
    """Evaluate the three score bounds at a fitted point.

    The scores are taken with the subgradient sign convention of the augmented
    program's penalty rows, ``sum_t psi(u_it) - lam * sign(alpha_i)``, so that at
    an optimum each unit score only counts the interpolated observations.
    Inactive intercepts (below the activity threshold) have sign 0.
    """
    tau, lam = config.tau, config.lam
    p, N = data.n_features, data.n_units
    if result.beta.size != p or result.alpha.size != N:
        raise ValueError("fit dimensions do not match the panel")
    w = np.ones(N) if unit_weights is None else np.asarray(unit_weights, dtype=np.float64)
    wr = np.repeat(w, data.obs_per_unit)
    ps = psi(result.residuals, tau) * wr
    sgn = np.zeros(N)
    sgn[result.active_set] = np.sign(result.alpha[result.active_set])
    g = np.linalg.norm(data.covariates.T @ ps) if p else 0.0
    unit_sum = np.add.reduceat(ps, data.starts[:-1])
    per_unit = np.abs(unit_sum - lam * w * sgn)
    total = abs(unit_sum.sum() - lam * float((w * sgn).sum()))
    xmax = float(np.max(np.linalg.norm(data.covariates, axis=1))) if p else 0.0
    wmax = float(w.max())
    k = p + N
    return OptimalityCertificate(
        global_score_norm=float(g),
        per_unit_scores=per_unit,
        total_score=float(total),
        global_bound=k * (xmax + 1.0) * wmax,
        per_unit_bounds=w * (np.minimum(k, data.obs_per_unit) + lam),
        total_bound=max(1.0, lam) * k * wmax,
    )


def _finish(data, config, beta, alpha, *, unit_weights=None, iterations=0, converged=True, gap=0.0, warns=()):
    thr = activity_threshold(data.response)
    alpha = np.array(alpha, dtype=np.float64)
    if config.lam > 0:
        alpha[np.abs(alpha) <= thr] = 0.0
        active = np.flatnonzero(alpha != 0.0)
    else:
        active = np.arange(data.n_units)
    beta = np.array(beta, dtype=np.float64).reshape(-1)
    resid = data.response - data.covariates @ beta - np.repeat(alpha, data.obs_per_unit)
    obj = objective(data, config, beta, alpha, unit_weights)
    res = FitResult(
        tau=config.tau,
        lam=config.lam,
        beta=beta,
        alpha=alpha,
        residuals=resid,
        objective=obj,
        active_set=active,
        certificate=None,
        iterations=int(iterations),
        converged=bool(converged),
        gap=float(gap),
        warnings=list(warns),
    )
    cert = check_optimality(data, config, res, unit_weights)
    if not cert.passed:
        gp = _general_position(data, resid)
        cert.general_position = gp
        if not gp:
            cert.slack = TIE_SLACK
            res.warnings.append("data not in general position (ties); score bounds checked with slack 2")
        if not cert.passed:
            res.warnings.append("optimality certificate failed")
            log.warning("optimality certificate failed at tau=%g lambda=%g", config.tau, config.lam)
    res.certificate = cert
    return res


def fixed_units(data: PanelData, config: FitConfig) -> np.ndarray:
    """Units whose intercept is provably zero at this penalty."""
    if config.lam == 0:
        return np.zeros(data.n_units, dtype=bool)
    return config.lam >= max(config.tau, 1 - config.tau) * data.obs_per_unit


def fit(data: PanelData, config: FitConfig, *, unit_weights=None, check=True) -> FitResult:
    """Solve the penalized problem to relative duality gap ``config.tol``.

    Intercepts of units with ``lam >= max(tau, 1 - tau) T_i`` are fixed at zero
    (an optimum always exists there), so for ``lam`` at or above the upper bound
    the fit is the pooled no-intercept quantile regression.
    """
    warns = []
    if check:
        check_rank(data, config.lam)
    if data.n_obs <= data.n_features + data.n_units:
        msg = f"only {data.n_obs} observations for {data.n_features + data.n_units} parameters"
        warns.append(msg)
        warnings.warn(msg, stacklevel=2)
    lam_u = lambda_upper_bound(config.tau, data.max_T)
    if config.lam > lam_u:
        warns.append(f"lambda {config.lam:g} exceeds the upper bound {lam_u:g}; all intercepts are zero")
    fixed = fixed_units(data, config)
    sol = _ipm.solve_batch(
        data.covariates,
        data.starts,
        data.response[None, :],
        config.lam,
        config.tau,
        row_weight=_unit_weight_rows(data, unit_weights),
        free=~fixed[None, :],
        tol=config.tol,
        max_iter=config.max_iter,
    )
    if not sol.converged[0]:
        raise SolverError(
            f"interior point stopped after {sol.iterations[0]} iterations with relative gap {sol.gap[0]:.3g}",
            beta=sol.beta[0],
            alpha=sol.alpha[0],
            gap=float(sol.gap[0]),
        )
    return _finish(
        data,
        config,
        sol.beta[0],
        sol.alpha[0],
        unit_weights=unit_weights,
        iterations=sol.iterations[0],
        converged=True,
        gap=sol.gap[0],
        warns=warns,
    )


def fit_many(data: PanelData, responses, lams, tau, *, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Fit several responses and/or penalties on one design in a single batch.

    Returns a list with a :class:`FitResult` per row, or ``None`` for rows
    that did not converge.
    """
    Y = np.atleast_2d(np.asarray(responses, dtype=np.float64))
    lams = np.atleast_1d(np.asarray(lams, dtype=np.float64))
    if Y.shape[0] == 1 and lams.size > 1:
        Y = np.repeat(Y, lams.size, axis=0)
    lams = np.broadcast_to(lams, (Y.shape[0],))
    R = Y.shape[0]
    free = np.stack([~fixed_units(data, FitConfig(tau, float(lm))) for lm in lams])
    sol = _ipm.solve_batch(data.covariates, data.starts, Y, lams, tau, free=free, tol=tol, max_iter=max_iter)
    out = []
    for r in range(R):
        if not sol.converged[r]:
            out.append(None)
            continue
        cfg = FitConfig(tau, float(lams[r]), tol, max_iter)
        d = data if np.array_equal(Y[r], data.response) else data.with_response(Y[r])
        out.append(_finish(d, cfg, sol.beta[r], sol.alpha[r], iterations=sol.iterations[r], gap=sol.gap[r]))
    return out

