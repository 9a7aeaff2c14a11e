"""Panel data container, CSV ingestion and diagnostics."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Base class for ingestion and validation failures."""


class SchemaError(DataError):
    """A required column is missing from the input."""


class ParseError(DataError):
    """A cell could not be parsed as a finite number."""


class ValidationError(DataError):
    """The panel violates a structural invariant."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelData:
    """Longitudinal data stored unit-major.

    Rows of ``covariates`` and entries of ``response`` are grouped in
    contiguous blocks, one block per unit, in the order of ``unit_ids``.
    The model has no global intercept, so no covariate column may be
    constant across all rows.
    """

    unit_ids: tuple
    obs_per_unit: np.ndarray
    response: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...] = ()
    times: np.ndarray | None = None

    def __post_init__(self):
        counts = np.asarray(self.obs_per_unit, dtype=np.int64).reshape(-1)
        y = np.asarray(self.response, dtype=np.float64).reshape(-1)
        X = np.asarray(self.covariates, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else np.zeros((y.size, 0))
        ids = tuple(self.unit_ids)

        if len(ids) < 1:
            raise ValidationError("panel must contain at least one unit")
        if len(ids) != counts.size:
            raise ValidationError(f"{len(ids)} unit ids but {counts.size} unit counts")
        if len(set(ids)) != len(ids):
            raise ValidationError("unit ids must be unique")
        if np.any(counts < 1):
            raise ValidationError("every unit needs at least one observation")
        if counts.sum() != y.size:
            raise ValidationError(f"unit counts sum to {counts.sum()}, response has {y.size} rows")
        if X.shape[0] != y.size:
            raise ValidationError(f"covariates have {X.shape[0]} rows, response has {y.size}")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
            raise ValidationError("all values must be finite")
        for j in range(X.shape[1]):
            if np.ptp(X[:, j]) == 0.0:
                name = self.covariate_names[j] if j < len(self.covariate_names) else f"x{j}"
                raise ValidationError(
                    f"covariate {name!r} is constant; the model has no global intercept, "
                    "so constant columns are not allowed"
                )
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValidationError(f"{len(names)} covariate names for {X.shape[1]} columns")

        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "obs_per_unit", _frozen(counts))
        object.__setattr__(self, "response", _frozen(y))
        object.__setattr__(self, "covariates", _frozen(X))
        object.__setattr__(self, "covariate_names", names)
        if self.times is not None:
            t = np.asarray(self.times, dtype=np.float64).reshape(-1)
            if t.size != y.size:
                raise ValidationError("times must have one entry per row")
            object.__setattr__(self, "times", _frozen(t))

    @classmethod
    def from_arrays(cls, units, y, X=None, times=None, covariate_names=()) -> PanelData:
        """Build a panel from row-level arrays in any row order.

        Units are ordered by first appearance; rows within a unit are sorted
        by ``times`` when given (stable otherwise).
        """
        units = np.asarray(units)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if X is None:
            X = np.zeros((y.size, 0))
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if units.shape[0] != y.size or X.shape[0] != y.size:
            raise ValidationError("units, y and X must have the same number of rows")
        codes, first = pd.factorize(units, sort=False)
        if times is None:
            order = np.argsort(codes, kind="stable")
            t_sorted = None
        else:
            times = np.asarray(times, dtype=np.float64).reshape(-1)
            order = np.lexsort((times, codes))
            t_sorted = times[order]
        counts = np.bincount(codes, minlength=len(first))
        return cls(
            unit_ids=tuple(first.tolist()),
            obs_per_unit=counts,
            response=y[order],
            covariates=X[order],
            covariate_names=tuple(covariate_names),
            times=t_sorted,
        )

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_obs(self) -> int:
        return int(self.response.size)

    @property
    def n_features(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def max_T(self) -> int:
        return int(self.obs_per_unit.max())

    @property
    def mean_T(self) -> float:
        return float(self.obs_per_unit.mean())

    @property
    def starts(self) -> np.ndarray:
        """Row offset of each unit block, length ``n_units + 1``."""
        return np.concatenate(([0], np.cumsum(self.obs_per_unit)))

    @property
    def unit_index(self) -> np.ndarray:
        """Unit position (0..N-1) of every row."""
        return np.repeat(np.arange(self.n_units), self.obs_per_unit)

    def subset(self, units: Sequence[int]) -> PanelData:
        """Panel restricted to the given unit positions, in the given order."""
        st = self.starts
        rows = np.concatenate([np.arange(st[i], st[i + 1]) for i in units])
        return PanelData(
            unit_ids=tuple(self.unit_ids[i] for i in units),
            obs_per_unit=self.obs_per_unit[list(units)],
            response=self.response[rows],
            covariates=self.covariates[rows],
            covariate_names=self.covariate_names,
            times=None if self.times is None else self.times[rows],
        )

    def with_response(self, y) -> PanelData:
        """Same design, new response vector (unit-major)."""
        return PanelData(
            unit_ids=self.unit_ids,
            obs_per_unit=self.obs_per_unit,
            response=y,
            covariates=self.covariates,
            covariate_names=self.covariate_names,
            times=self.times,
        )

    def to_frame(self, unit="unit", time="time", y="y") -> pd.DataFrame:
        t = self.times
        if t is None:
            t = np.concatenate([np.arange(1, c + 1) for c in self.obs_per_unit]).astype(float)
        df = pd.DataFrame({unit: np.repeat(np.array(self.unit_ids, dtype=object), self.obs_per_unit),
                           time: t, y: self.response})
        for j, name in enumerate(self.covariate_names):
            df[name] = self.covariates[:, j]
        return df

    def to_csv(self, path, unit="unit", time="time", y="y") -> None:
        self.to_frame(unit, time, y).to_csv(path, index=False, float_format="%.17g")

    def equals(self, other: PanelData) -> bool:
        return (
            self.unit_ids == other.unit_ids
            and np.array_equal(self.obs_per_unit, other.obs_per_unit)
            and np.array_equal(self.response, other.response)
            and np.array_equal(self.covariates, other.covariates)
            and self.covariate_names == other.covariate_names
        )


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_csv`."""

    unit: str
    y: str
    x: tuple[str, ...] = ()
    time: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> CsvSchema:
        return cls(unit=d["unit"], y=d["y"], x=tuple(d.get("x", ())), time=d.get("time"))


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def load_csv(path, schema: CsvSchema | dict) -> PanelData:
    """Read a long-format panel from CSV.

    Rows are grouped by unit (first-appearance order) and sorted by the time
    column within each unit. Missing values are rejected.
    """
    if isinstance(schema, dict):
        schema = CsvSchema.from_dict(schema)
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    needed = [schema.unit, schema.y, *schema.x] + ([schema.time] if schema.time else [])
    for col in needed:
        if col not in df.columns:
            raise SchemaError(f"missing column {col!r} in {path}")

    def numeric(col):
        raw = df[col].str.strip()
        # python float() parsing is correctly rounded, so written values round-trip exactly
        vals = np.array([_parse_float(v) for v in raw], dtype=np.float64)
        bad = ~np.isfinite(vals)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            # header is line 1
            raise ParseError(f"column {col!r}, line {i + 2}: cannot parse {df[col].iloc[i]!r} as a number")
        return vals

    y = numeric(schema.y)
    X = np.column_stack([numeric(c) for c in schema.x]) if schema.x else np.zeros((len(df), 0))
    t = numeric(schema.time) if schema.time else None
    units = df[schema.unit].to_numpy(dtype=object)
    if np.any(df[schema.unit].str.strip() == ""):
        i = int(np.flatnonzero(df[schema.unit].str.strip().to_numpy() == "")[0])
        raise ParseError(f"column {schema.unit!r}, line {i + 2}: empty unit id")
    return PanelData.from_arrays(units, y, X, times=t, covariate_names=schema.x)


@dataclass
class DataDiagnostics:
    n_units: int
    total_obs: int
    p: int
    min_T: int
    max_T: int
    balance_ratio: float
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


BALANCE_WARN_RATIO = 5.0
SHORT_PANEL_T = 3


def validate(data: PanelData) -> DataDiagnostics:
    """Summarize panel shape and flag designs the estimator handles poorly."""
    T = data.obs_per_unit
    ratio = float(T.max() / T.min())
    warns = []
    if T.min() < SHORT_PANEL_T:
        warns.append(f"{int((T < SHORT_PANEL_T).sum())} unit(s) have fewer than {SHORT_PANEL_T} observations")
    if ratio >= BALANCE_WARN_RATIO:
        warns.append(f"unbalanced panel: max T_i / min T_i = {ratio:g}")
    if data.times is not None:
        st = data.starts
        dup = sum(np.unique(data.times[st[i]:st[i + 1]]).size < T[i] for i in range(data.n_units))
        if dup:
            warns.append(f"{dup} unit(s) have repeated time values")
    return DataDiagnostics(
        n_units=data.n_units,
        total_obs=data.n_obs,
        p=data.n_features,
        min_T=int(T.min()),
        max_T=int(T.max()),
        balance_ratio=ratio,
        warnings=warns,
    )
