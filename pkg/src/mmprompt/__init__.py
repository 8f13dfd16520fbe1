"""Correlation-selected multimodal prompts for a frozen toy decoder."""
from .backbone import Backbone, BackboneConfig, ModalityEncoderConfig
from .config import ExperimentConfig, load_config
from .data import SyntheticConfig, generate_synthetic, load_dataset, load_splits
from .model import PromptedModel
from .training import TrainConfig, ablate, load_checkpoint, save_checkpoint, train

__all__ = [
    "Backbone", "BackboneConfig", "ModalityEncoderConfig", "ExperimentConfig", "load_config",
    "SyntheticConfig", "generate_synthetic", "load_dataset", "load_splits", "PromptedModel",
    "TrainConfig", "ablate", "load_checkpoint", "save_checkpoint", "train",
]
__version__ = "0.1.0"
