"""L1-penalized fixed-effects quantile regression for panel data with wild bootstrap inference."""

from .data import CsvSchema, DataDiagnostics, PanelData, load_csv, validate
from .solver import (
    FitConfig,
    FitResult,
    OptimalityCertificate,
    augment_design,
    check_optimality,
    fit,
    lambda_upper_bound,
    objective,
    psi,
    rho,
)

__version__ = "0.1.0"

__all__ = [
    "CsvSchema",
    "DataDiagnostics",
    "FitConfig",
    "FitResult",
    "OptimalityCertificate",
    "PanelData",
    "augment_design",
    "check_optimality",
    "fit",
    "lambda_upper_bound",
    "load_csv",
    "objective",
    "psi",
    "rho",
    "validate",
]
