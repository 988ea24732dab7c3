"""Reservoir-augmented masked autoencoding transformer for multivariate KPI series."""

from .model import ModelConfig
from .reservoir import ReservoirConfig, build_reservoir
from .train import FreezePlan, TrainConfig, finetune, pretrain

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ReservoirConfig", "TrainConfig", "FreezePlan",
           "build_reservoir", "pretrain", "finetune"]
