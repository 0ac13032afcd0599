"""Quantile regression for right-censored failure times with step-function
time-dependent covariates."""

from .augmented import AugmentedEquation, MonteCarloQ, PositedModel, ZeroModel, fit_dr, monte_carlo_q
from .bootstrap import BootstrapResult, bootstrap
from .censoring import CensorCurve, cumhaz_increments, fit_censor_km, survival_at
from .data import CovariatePath, Dataset, Subject, path_value, validate
from .dataio import emit, ingest
from .errors import QRTDError
from .estimator import QuantileFit, SolverConfig, estimating_equation, fit, smoothed_indicator
from .simulation import ScenarioConfig, generate, run_study
from .timewarp import Coefficients, warp_integral, warp_inverse

__version__ = "0.1.0"

__all__ = [
    "AugmentedEquation",
    "BootstrapResult",
    "CensorCurve",
    "Coefficients",
    "CovariatePath",
    "Dataset",
    "MonteCarloQ",
    "PositedModel",
    "QRTDError",
    "QuantileFit",
    "ScenarioConfig",
    "SolverConfig",
    "Subject",
    "ZeroModel",
    "bootstrap",
    "cumhaz_increments",
    "emit",
    "estimating_equation",
    "fit",
    "fit_censor_km",
    "fit_dr",
    "generate",
    "ingest",
    "monte_carlo_q",
    "path_value",
    "run_study",
    "smoothed_indicator",
    "survival_at",
    "validate",
    "warp_integral",
    "warp_inverse",
]
