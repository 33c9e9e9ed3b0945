"""Capacity-constrained matrix factorization recommenders (PMF, BPR and geographical variants)."""
from .core import ContextVectors, LatentModel, RatingsDataset, TrainConfig, sigmoid
from .evaluate import MetricsReport, evaluate, post_process_baseline
from .objective import capacity_term, expected_usage, objective_value, surrogate_loss
from .train import train, train_unconstrained

__all__ = [
    "ContextVectors",
    "LatentModel",
    "MetricsReport",
    "RatingsDataset",
    "TrainConfig",
    "capacity_term",
    "evaluate",
    "expected_usage",
    "objective_value",
    "post_process_baseline",
    "sigmoid",
    "surrogate_loss",
    "train",
    "train_unconstrained",
]

__version__ = "0.1.0"
