"""Curvature-aware weighted coreset selection and training on small convex and toy models."""

from .coreset import Coreset, facility_objective, greedy_select, per_class_select, random_select
from .curvature import EmaState, PreconditionerConfig, hutchinson_diag, selection_features
from .data import Dataset, generate_synthetic, imbalanced_spec, load_libsvm
from .harness import ConfigError, ExperimentConfig, run_experiment
from .models import LogisticModel, RidgeModel, ToyMlp, build_model
from .numerics import SeededRng

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Coreset",
    "Dataset",
    "EmaState",
    "ExperimentConfig",
    "LogisticModel",
    "PreconditionerConfig",
    "RidgeModel",
    "SeededRng",
    "ToyMlp",
    "build_model",
    "facility_objective",
    "generate_synthetic",
    "greedy_select",
    "hutchinson_diag",
    "imbalanced_spec",
    "load_libsvm",
    "per_class_select",
    "random_select",
    "run_experiment",
    "selection_features",
]
