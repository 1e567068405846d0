"""Posterior-aware split-conformal regression on a last-layer Laplace head."""

__version__ = "0.1.0"

from . import backbone, conformal, data, diagnostics, evaluation, linalg, llla  # noqa: E402
from .conformal import calibrate, centrality_score, claps_interval  # noqa: E402
from .exceptions import ClapsError  # noqa: E402
from .llla import LaplacePosterior, PredictiveGaussian, fit_llla, predictive  # noqa: E402

__all__ = [
    "backbone",
    "conformal",
    "data",
    "diagnostics",
    "evaluation",
    "linalg",
    "llla",
    "calibrate",
    "centrality_score",
    "claps_interval",
    "ClapsError",
    "LaplacePosterior",
    "PredictiveGaussian",
    "fit_llla",
    "predictive",
]
