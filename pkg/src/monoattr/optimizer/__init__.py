"""Explanation optimizers (TEO, DEO) and their training objective."""

from .deo import DeoConfig, DeoModel, Schedule, deo_posterior, deo_q_sample, deo_simple_loss
from .loss import LossOutput, LossWeights, smooth_max, total_loss
from .teo import TeoConfig, TeoModel, teo_forward, teo_similarity_loss
from .train import OptimizerConfig, TrainingError, explain, train_optimizer, write_curve_csv

__all__ = [
    "DeoConfig", "DeoModel", "Schedule", "deo_posterior", "deo_q_sample", "deo_simple_loss",
    "LossOutput", "LossWeights", "smooth_max", "total_loss",
    "TeoConfig", "TeoModel", "teo_forward", "teo_similarity_loss",
    "OptimizerConfig", "TrainingError", "explain", "train_optimizer", "write_curve_csv",
]
