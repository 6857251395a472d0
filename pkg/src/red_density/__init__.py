"""Recurrent estimation of distributions: normalized density estimation for
real-valued vectors with recurrent transforms and GRU-driven mixture
conditionals."""

from .data import Dataset, Standardizer, load_csv, split
from .estimator import RED
from .evaluation import average_precision, ndcg, paired_t_test, pr_curve
from .model import ModelConfig, RedModel, init_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, gradient_check, loss_and_gradients, train

__all__ = [
    "RED",
    "Dataset",
    "Standardizer",
    "load_csv",
    "split",
    "ModelConfig",
    "RedModel",
    "init_model",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "train",
    "loss_and_gradients",
    "gradient_check",
    "average_precision",
    "ndcg",
    "pr_curve",
    "paired_t_test",
]

__version__ = "0.1.0"
