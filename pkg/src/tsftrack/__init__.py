"""Twofold structured features Siamese tracker with multi-template update."""
from .geometry import Box, CropSpec, center_error, crop_patch, exemplar_side, iou
from .model import ModelConfig, TSFSiam, load_checkpoint, save_checkpoint
from .tracker import TrackConfig, Tracker, run_sequence, track_sequence

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CropSpec",
    "ModelConfig",
    "TSFSiam",
    "TrackConfig",
    "Tracker",
    "center_error",
    "crop_patch",
    "exemplar_side",
    "iou",
    "load_checkpoint",
    "run_sequence",
    "save_checkpoint",
    "track_sequence",
]
