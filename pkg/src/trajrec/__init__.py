"""Recover pen trajectories (point order, strokes, stroke order) from
offline handwriting images with an attention encoder-decoder network."""

from .dataio import InkSample, SynthesisConfig, generate_synthetic, read_ink, write_ink
from .ink import Trajectory, preprocess, rasterize
from .model import Model, ModelConfig, preset_config
from .recovery import RecoveryConfig, decode, recover
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "InkSample",
    "Model",
    "ModelConfig",
    "RecoveryConfig",
    "SynthesisConfig",
    "TrainConfig",
    "Trajectory",
    "decode",
    "generate_synthetic",
    "load_checkpoint",
    "preprocess",
    "preset_config",
    "rasterize",
    "read_ink",
    "recover",
    "save_checkpoint",
    "train",
    "write_ink",
]
