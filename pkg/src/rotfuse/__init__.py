"""Two-view gaze estimation with rotatable features, on a synthetic camera rig."""

from .model import FusionNet, ModelConfig
from .synthdata import SynthConfig, generate_dataset, read_dataset, write_dataset
from .train import TrainConfig, train_model

__version__ = "0.1.0"

__all__ = [
    "FusionNet",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
    "generate_dataset",
    "read_dataset",
    "train_model",
    "write_dataset",
]
