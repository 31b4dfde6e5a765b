"""Bi-dimensional finite mixtures for longitudinal outcomes with informative dropout."""

from importlib.metadata import PackageNotFoundError, version

from .data import DataError, PanelDataset, Schema, load_csv, write_csv
from .em import FitConfig, FitResult, fit
from .inference import sandwich_covariance, se_table
from .model import Theta, observed_loglik
from .selection import grid_search
from .sensitivity import isni_matrix, scenario1, scenario2
from .simulate import CovariateSpec, SimSpec, generate

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0+unknown"

__all__ = [
    "DataError", "PanelDataset", "Schema", "load_csv", "write_csv",
    "FitConfig", "FitResult", "fit", "sandwich_covariance", "se_table",
    "Theta", "observed_loglik", "grid_search", "isni_matrix", "scenario1", "scenario2",
    "CovariateSpec", "SimSpec", "generate", "__version__",
]
