"""Deformable-convolution defect detector built from scratch on numpy."""
from .config import BackboneConfig, ConfigError, ModelConfig, NeckConfig, TrainConfig
from .head import BBox, Detection
from .model import Detector, load_checkpoint, save_checkpoint

__all__ = ["BBox", "BackboneConfig", "ConfigError", "Detection", "Detector", "ModelConfig",
           "NeckConfig", "TrainConfig", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
