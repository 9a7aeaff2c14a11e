"""Penalty selection by a modified BIC or generalized cross-validation.

Every grid point is fitted independently (one batched interior-point call
covers the whole grid), and the per-penalty trace is returned alongside the
choice.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import PanelData
from .solver import SolverError, fit_many, lambda_upper_bound


@dataclass(frozen=True)
class TuningConfig:
    """Grid and criterion for penalty selection.

    Parameters
    ----------
    grid : ascending penalties, or ``None`` for :func:`default_grid`.
    criterion : ``"gcv"`` or ``"bic"``.
    c_nt : BIC severity constant; default ``max(1, log log n)``.
    normalize_by_T : report the chosen penalty divided by the mean panel length.
    bic_form : ``"log"`` uses ``log(check loss)`` as the fit term, which makes
        the size penalty commensurate with the fit; ``"raw"`` uses the check
        loss itself.
    n_points : size of the default grid.
    """

    grid: tuple[float, ...] | None = None
    criterion: str = "gcv"
    c_nt: float | None = None
    normalize_by_T: bool = False
    bic_form: str = "log"
    n_points: int = 25

    def __post_init__(self):
        if self.criterion not in ("bic", "gcv"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.bic_form not in ("log", "raw"):
            raise ValueError(f"unknown bic_form {self.bic_form!r}")
        if self.grid is not None:
            g = tuple(float(v) for v in self.grid)
            if not g:
                raise ValueError("grid must be nonempty")
            if any(v < 0 for v in g):
                raise ValueError("grid values must be nonnegative")
            if any(b < a for a, b in zip(g, g[1:])):
                raise ValueError("grid must be sorted ascending")
            object.__setattr__(self, "grid", g)
        if self.c_nt is not None and not self.c_nt > 0:
            raise ValueError("c_nt must be positive")

    def to_dict(self) -> dict:
        return {
            "grid": None if self.grid is None else list(self.grid),
            "criterion": self.criterion,
            "c_nt": self.c_nt,
            "normalize_by_T": self.normalize_by_T,
            "bic_form": self.bic_form,
            "n_points": self.n_points,
        }


@dataclass
class LambdaRecord:
    lam: float
    criterion: float
    active_count: int
    checkloss: float
    objective: float


@dataclass
class TuningResult:
    chosen_lambda: float
    criterion: str
    per_lambda: list[LambdaRecord]
    mean_T: float = 1.0
    normalize_by_T: bool = False
    fits: list = field(default_factory=list, repr=False)

    @property
    def reported_lambda(self) -> float:
        return self.chosen_lambda / self.mean_T if self.normalize_by_T else self.chosen_lambda

    @property
    def chosen_fit(self):
        for rec, f in zip(self.per_lambda, self.fits):
            if rec.lam == self.chosen_lambda:
                return f
        return None

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "chosen_lambda": self.chosen_lambda,
            "reported_lambda": self.reported_lambda,
            "normalized_by_mean_T": self.normalize_by_T,
            "mean_T": self.mean_T,
            "trace": [
                {
                    "lambda": r.lam,
                    "criterion": r.criterion,
                    "active_count": r.active_count,
                    "checkloss": r.checkloss,
                }
                for r in self.per_lambda
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "criterion", "active_count", "checkloss"])
            for r in self.per_lambda:
                w.writerow([repr(r.lam), repr(r.criterion), r.active_count, repr(r.checkloss)])


def default_grid(data: PanelData, tau: float, n_points: int = 25) -> tuple[float, ...]:
    """Zero plus geometric spacing from ``1e-4 lam_U`` to ``lam_U``."""
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    lam_u = lambda_upper_bound(tau, data.max_T)
    if n_points == 2:
        return (0.0, lam_u)
    return (0.0, *np.geomspace(lam_u * 1e-4, lam_u, n_points - 1).tolist())


def default_c_nt(n: int) -> float:
    return max(1.0, math.log(math.log(n))) if n > 1 else 1.0


def _fit_grid(data, tau, grid):
    fits = fit_many(data, data.response, np.asarray(grid), tau)
    for lam, f in zip(grid, fits):
        if f is None:
            raise SolverError(f"fit failed to converge at lambda={lam:g}")
    return fits


def _select(data, tau, config, score):
    grid = config.grid if config.grid is not None else default_grid(data, tau, config.n_points)
    lam_u = lambda_upper_bound(tau, data.max_T)
    if grid[-1] > lam_u * (1 + 1e-12):
        raise ValueError(f"grid exceeds the upper bound {lam_u:g}")
    fits = _fit_grid(data, tau, grid)
    recs = []
    for lam, f in zip(grid, fits):
        loss = float(f.objective - lam * np.abs(f.alpha).sum())
        recs.append(LambdaRecord(float(lam), score(loss, f), f.active_count, loss, f.objective))
    vals = np.array([r.criterion for r in recs])
    best = vals.min()
    # ties go to the larger penalty
    k = int(np.flatnonzero(vals == best)[-1])
    return TuningResult(
        chosen_lambda=recs[k].lam,
        criterion=config.criterion,
        per_lambda=recs,
        mean_T=data.mean_T,
        normalize_by_T=config.normalize_by_T,
        fits=fits,
    )


def bic_select(data: PanelData, tau: float, config: TuningConfig) -> TuningResult:
    """Minimize ``fit + |S| log(n) / (2 n) C_NT`` with ``n`` the total observations."""
    n = data.n_obs
    c = config.c_nt if config.c_nt is not None else default_c_nt(n)
    pen = math.log(n) / (2.0 * n) * c

    def score(loss, f):
        fit_term = math.log(max(loss, 1e-300)) if config.bic_form == "log" else loss
        return fit_term + f.active_count * pen

    return _select(data, tau, config, score)


def gcv_select(data: PanelData, tau: float, config: TuningConfig) -> TuningResult:
    """Minimize ``(loss / n) / (1 - df / n)^2`` with ``df = p + |S|``."""
    n = data.n_obs

    def score(loss, f):
        df = data.n_features + f.active_count
        if df >= n:
            return math.inf
        return (loss / n) / (1.0 - df / n) ** 2

    return _select(data, tau, config, score)


def select(data: PanelData, tau: float, config: TuningConfig) -> TuningResult:
    return bic_select(data, tau, config) if config.criterion == "bic" else gcv_select(data, tau, config)
