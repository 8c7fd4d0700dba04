"""kalmis: Kalman filtering under parameter misspecification.

Simulate Gaussian state-space models, filter them with deliberately
biased parameters, quantify the serial correlation this induces in the
interpolation residual, and search the bias out again by minimizing the
residual's empirical autocovariances.
"""

from .statespace import (
    DomainError,
    InadmissibleParameterError,
    ModelSpec,
    ParamVector,
    Trajectory,
    fd_jacobian,
    linearize,
    seed_sequence,
    simulate,
)
from .filters import FilterError, FilterTrace, ResidualSeries, kalman_step, run_filter
from .residuals import (
    AutocovTable,
    EstimationResult,
    ObjectiveSpec,
    OptimizerOptions,
    WhitenessReport,
    autocov_table,
    empirical_autocov,
    estimate_bias,
    objective,
    objective_from_series,
    whiteness_report,
)
from .perturbation import (
    BiasDirection,
    CorrectionTerms,
    CovarianceBlocks,
    corrective_terms,
    directional_derivatives,
    error_lag_cov,
    error_measnoise_cov,
    error_state_cov,
    interpolation_autocov,
    predict_residuals,
    residual_lag_cov_direct,
)
from . import models
from .models import build_model

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "InadmissibleParameterError",
    "ModelSpec",
    "ParamVector",
    "Trajectory",
    "fd_jacobian",
    "linearize",
    "seed_sequence",
    "simulate",
    "FilterError",
    "FilterTrace",
    "ResidualSeries",
    "kalman_step",
    "run_filter",
    "AutocovTable",
    "EstimationResult",
    "ObjectiveSpec",
    "OptimizerOptions",
    "WhitenessReport",
    "autocov_table",
    "empirical_autocov",
    "estimate_bias",
    "objective",
    "objective_from_series",
    "whiteness_report",
    "BiasDirection",
    "CorrectionTerms",
    "CovarianceBlocks",
    "corrective_terms",
    "directional_derivatives",
    "error_lag_cov",
    "error_measnoise_cov",
    "error_state_cov",
    "interpolation_autocov",
    "predict_residuals",
    "residual_lag_cov_direct",
    "models",
    "build_model",
    "__version__",
]
