"""Spatio-temporal Gaussian-process model: covariances, priors, fitting, prediction."""
from .covariance import (
    CovarianceError,
    KalmanCovariance,
    KroneckerCovariance,
    SliceCovariance,
    ar1_correlation,
    build_covariance,
    dense_condition,
    dense_covariance,
    matern_nu1,
)
from .model import (
    ConvergenceError,
    FitError,
    FixedEffects,
    GpData,
    GpHyperParams,
    ModelFit,
    ModelSpec,
    PredictionResult,
    Target,
    fit,
    gaussian_loglik,
    kriging_weights,
    log_posterior,
    log_posterior_and_gradient,
    predict,
    predict_grid,
)
from .priors import DEFAULT_PRIORS, CorrelationPrior, PriorSet, RangePrior, SdPrior

__all__ = [
    "ConvergenceError", "CorrelationPrior", "CovarianceError", "DEFAULT_PRIORS", "FitError", "FixedEffects",
    "GpData", "GpHyperParams", "KalmanCovariance", "KroneckerCovariance", "ModelFit", "ModelSpec",
    "PredictionResult", "PriorSet", "RangePrior", "SdPrior", "SliceCovariance", "Target", "ar1_correlation",
    "build_covariance", "dense_condition", "dense_covariance", "fit", "gaussian_loglik", "kriging_weights",
    "log_posterior", "log_posterior_and_gradient", "matern_nu1", "predict", "predict_grid",
]
