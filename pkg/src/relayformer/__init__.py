"""Manipulation localization with relay-token attention over resolution-agnostic units."""

from relayformer.config import DataConfig, ModelConfig, OptimConfig, RunConfig, toy_config
from relayformer.model import RelayFormer, predict_batch

__version__ = "0.1.0"

__all__ = [
    "DataConfig",
    "ModelConfig",
    "OptimConfig",
    "RelayFormer",
    "RunConfig",
    "predict_batch",
    "toy_config",
]
