"""Domain generalization by fusing source-specific classifiers."""
from .estimator import DomainMixtureClassifier
from .model import Architecture, ModelParams, init_params, mix, predict
from .train import TrainConfig, train

__all__ = [
    "Architecture",
    "DomainMixtureClassifier",
    "ModelParams",
    "TrainConfig",
    "init_params",
    "mix",
    "predict",
    "train",
]
__version__ = "0.1.0"
