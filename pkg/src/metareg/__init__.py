"""Deformable 3D registration with Reptile meta-learning and test-time optimization."""

from .core import ParamVector, Tape, Tensor
from .losses import LossWeights, bending_energy, dice, ssd, total_loss, tre
from .meta import (
    EpisodeConfig,
    MetaConfig,
    TtoConfig,
    classical_register,
    meta_train,
    reptile_update,
    run_episode,
    test_time_optimize,
    train_conventional,
)
from .models import DirectDdfModel, RegNet, RegNetConfig, init_regnet
from .transforms import AffineParams, AffineRanges, DisplacementField, warp_mask, warp_volume
from .volume import Volume

__all__ = [
    "AffineParams",
    "AffineRanges",
    "DirectDdfModel",
    "DisplacementField",
    "EpisodeConfig",
    "LossWeights",
    "MetaConfig",
    "ParamVector",
    "RegNet",
    "RegNetConfig",
    "Tape",
    "Tensor",
    "TtoConfig",
    "Volume",
    "bending_energy",
    "classical_register",
    "dice",
    "init_regnet",
    "meta_train",
    "reptile_update",
    "run_episode",
    "ssd",
    "test_time_optimize",
    "total_loss",
    "train_conventional",
    "tre",
    "warp_mask",
    "warp_volume",
]
