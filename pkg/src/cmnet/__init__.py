"""Coordinate-ascent variational inference for conditional mixture networks."""

from .cmn import CMNModel, CMNPosterior, FitConfig, FitError, FitTrace, elbo, fit, predict, sample_class_probs
from .data import Dataset, PinwheelParams, generate_pinwheel, load_csv, standardize, stratified_split
from .metrics import PredictionSet, accuracy, ece, lpd, steps_to_converge, waic

__version__ = "0.1.0"

__all__ = [
    "CMNModel",
    "CMNPosterior",
    "FitConfig",
    "FitError",
    "FitTrace",
    "elbo",
    "fit",
    "predict",
    "sample_class_probs",
    "Dataset",
    "PinwheelParams",
    "generate_pinwheel",
    "load_csv",
    "standardize",
    "stratified_split",
    "PredictionSet",
    "accuracy",
    "ece",
    "lpd",
    "steps_to_converge",
    "waic",
]
