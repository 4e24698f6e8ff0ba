"""Mixed-frequency mortality forecasting with annual and monthly data."""

from .data import AgeGrid, DataError, MortalityData, load_data
from .evaluate import EvalSpec, run_backtest, run_nowcast
from .forecast import ForecastBundle, LcModel, MfssModel, prediction_interval, simulate_paths
from .lc import LcParams, fit_lc
from .mfss import MfssParams, em_fit
from .reconcile import estimate_weights, reconcile
from .synth import DgpConfig, generate

__version__ = "0.1.0"

__all__ = [
    "AgeGrid",
    "DataError",
    "DgpConfig",
    "EvalSpec",
    "ForecastBundle",
    "LcModel",
    "LcParams",
    "MfssModel",
    "MfssParams",
    "MortalityData",
    "em_fit",
    "estimate_weights",
    "fit_lc",
    "generate",
    "load_data",
    "prediction_interval",
    "reconcile",
    "run_backtest",
    "run_nowcast",
    "simulate_paths",
]
