"""Scalar 3D volumes with isotropic physical spacing."""

from dataclasses import dataclass

import numpy as np


@dataclass
class Volume:
    """A 3D scalar grid (X,Y,Z float32) with isotropic voxel spacing in mm."""

    grid: np.ndarray
    spacing: float = 0.8

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 3:
            raise ValueError("volume grid must be 3D")
        if self.spacing <= 0:
            raise ValueError("voxel spacing must be positive")

    @property
    def shape(self):
        return self.grid.shape

    def copy(self):
        return Volume(self.grid.copy(), self.spacing)

    def is_binary(self):
        return bool(np.isin(self.grid, (0.0, 1.0)).all())
