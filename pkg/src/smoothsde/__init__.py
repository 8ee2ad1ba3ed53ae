"""Varying-coefficient SDE models with penalized spline smooths.

SDE drift and diffusion parameters are modeled on link scales as sums of
fixed effects, random intercepts, and penalized B-spline smooths of
covariates. Models are fitted by maximizing a Laplace-approximated marginal
likelihood with smoothing parameters estimated alongside the fixed effects.
"""

__version__ = "0.1.0"

from .basis import (
    FormulaTerm,
    DesignSet,
    build_spline_block,
    build_design_set,
    linear_predictor,
    apply_link,
)
from .data import Dataset, ingest_csv
from .diagnostics import (
    ResidualSeries,
    acf,
    coverage_experiment,
    qq_points,
    residuals,
)
from .errors import NumericalError, SmoothSdeError, UserError
from .families import SdeFamily, ctcrw_speed, get_family, simulate_path
from .inference import (
    FitResult,
    ModelSpec,
    fit,
    marginal_aic,
    parameter_draws,
    posterior_samples,
    predict_parameters,
)
from .sim import (
    ScenarioConfig,
    default_config,
    range_normalized_rmse,
    run_scenario,
)

__all__ = [
    "__version__",
    "FormulaTerm",
    "DesignSet",
    "build_spline_block",
    "build_design_set",
    "linear_predictor",
    "apply_link",
    "Dataset",
    "ingest_csv",
    "ResidualSeries",
    "acf",
    "coverage_experiment",
    "qq_points",
    "residuals",
    "SmoothSdeError",
    "UserError",
    "NumericalError",
    "SdeFamily",
    "get_family",
    "simulate_path",
    "ctcrw_speed",
    "FitResult",
    "ModelSpec",
    "fit",
    "marginal_aic",
    "parameter_draws",
    "posterior_samples",
    "predict_parameters",
    "ScenarioConfig",
    "default_config",
    "range_normalized_rmse",
    "run_scenario",
]
