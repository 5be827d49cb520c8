"""Minute-level citywide accident forecasting on a grid of subregions."""

from .errors import ConfigError, DataError, NumericError, RiskOracleError
from .grid import UrbanGrid
from .kernels import BACKEND as KERNEL_BACKEND
from .pipeline import RunConfig, ablate, predict, run, train

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "KERNEL_BACKEND", "NumericError", "RiskOracleError",
           "RunConfig", "UrbanGrid", "ablate", "predict", "run", "train"]
