"""Training with random per-feature learning rates.

Each pre-classifier feature gets its own learning rate, drawn log-uniformly
from an interval; the output layer is cloned, each clone trained at a rate
from a log-spaced grid, and the clones are combined by switch model averaging.
"""

from .config import ConfigError, TrainConfig, load_config
from .engine import AlraoModel, alrao_predict, alrao_step, build_alrao
from .features import LrInterval, classifier_lr_grid, partition_features, sample_feature_lrs
from .kernels import BACKEND
from .nn import Activation, BatchNorm1d, Conv2d, Dense, Flatten, Network

__version__ = "0.1.0"

__all__ = [
    "Activation", "AlraoModel", "BACKEND", "BatchNorm1d", "ConfigError", "Conv2d", "Dense", "Flatten",
    "LrInterval", "Network", "TrainConfig", "alrao_predict", "alrao_step", "build_alrao",
    "classifier_lr_grid", "load_config", "partition_features", "sample_feature_lrs",
]
