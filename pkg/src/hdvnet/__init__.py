"""Semantic segmentation of point clouds whose density varies over many orders of magnitude."""
from .density import (DensityProfile, StateThresholds, calibrate_states, density_profile,
                      group_thresholds, inherent_state)
from .errors import HDVError
from .model import HdvConfig, HDVNet
from .pcio import PointCloud, load_cloud, save_cloud
from .train import Scene, TrainConfig, finetune_final, train_backbone

__version__ = "0.1.0"

__all__ = [
    "DensityProfile", "StateThresholds", "calibrate_states", "density_profile", "group_thresholds",
    "inherent_state", "HDVError", "HdvConfig", "HDVNet", "PointCloud", "load_cloud", "save_cloud",
    "Scene", "TrainConfig", "finetune_final", "train_backbone",
]
