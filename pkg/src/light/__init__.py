"""Joint building instance segmentation and height estimation."""

from .config import TrainConfig
from .estimator import LightEstimator, Prediction
from .model import MODES, LightNet, ModelConfig
from .synthdata import SceneSpec, generate_scene, write_dataset

__all__ = [
    "MODES",
    "LightEstimator",
    "LightNet",
    "ModelConfig",
    "Prediction",
    "SceneSpec",
    "TrainConfig",
    "generate_scene",
    "write_dataset",
]
__version__ = "0.1.0"
