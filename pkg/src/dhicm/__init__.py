"""Transformer translation models with dynamic head-importance combination (DHICM).

Everything runs on a small numpy autodiff engine (:mod:`dhicm.autodiff`).
"""

from .config import ConfigError, ModelConfig, TrainConfig, load_config
from .model import Model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["ConfigError", "ModelConfig", "TrainConfig", "load_config", "Model", "load_checkpoint",
           "save_checkpoint", "__version__"]
