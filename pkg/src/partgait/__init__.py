"""Part-based attentive gait embeddings on binary silhouettes, in plain numpy."""

from .errors import (CheckpointError, ConfigError, DegenerateBatch, EmptyGalleryView, EmptySequence,
                     EmptySilhouette, InvalidBinCount, ManifestError, MissingFrames, PartGaitError,
                     ShapeMismatch, ZeroVector)
from .model import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DegenerateBatch", "EmptyGalleryView", "EmptySequence",
    "EmptySilhouette", "InvalidBinCount", "ManifestError", "MissingFrames", "PartGaitError",
    "ShapeMismatch", "ZeroVector", "ModelConfig", "ModelParams", "init_params", "load_checkpoint",
    "save_checkpoint",
]
