"""Dense displacement fields, volume warping, and random affine augmentation."""

from dataclasses import dataclass

import numpy as np

from .core import Tensor, add, constant, trilinear_gather, trilinear_sample
from .volume import Volume


@dataclass
class DisplacementField:
    """Per-voxel displacements (3,X,Y,Z) in voxel units of the fixed grid, (dx,dy,dz)."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 4 or self.vectors.shape[0] != 3:
            raise ValueError("displacement field must have shape (3,X,Y,Z)")

    @property
    def grid_shape(self):
        return self.vectors.shape[1:]

    @classmethod
    def zero(cls, shape):
        return cls(np.zeros((3, *shape), dtype=np.float32))


@dataclass
class AffineRanges:
    """Half-widths for uniform affine sampling (flip-free by construction)."""

    rot_rad: float = 0.1
    scale_min: float = 0.9
    scale_max: float = 1.1
    trans_vox: float = 2.0
    shear: float = 0.05

    @classmethod
    def disabled(cls):
        return cls(rot_rad=0.0, scale_min=1.0, scale_max=1.0, trans_vox=0.0, shear=0.0)


@dataclass
class AffineParams:
    rotation: np.ndarray  # 3 angles, radians
    scale: np.ndarray  # 3 strictly positive factors
    translation: np.ndarray  # 3 offsets, voxels
    shear: np.ndarray  # 3 factors (xy, xz, yz)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.shear = np.asarray(self.shear, dtype=np.float64)
        if (self.scale <= 0).any():
            raise ValueError("scale factors must be strictly positive")

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.ones(3), np.zeros(3), np.zeros(3))

    def is_identity(self):
        return (
            not self.rotation.any()
            and (self.scale == 1.0).all()
            and not self.translation.any()
            and not self.shear.any()
        )

    def matrix(self):
        """Linear part A (rotation @ shear @ scale) and translation t."""
        ax, ay, az = self.rotation
        cx, sx = np.cos(ax), np.sin(ax)
        cy, sy = np.cos(ay), np.sin(ay)
        cz, sz = np.cos(az), np.sin(az)
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        hxy, hxz, hyz = self.shear
        sh = np.array([[1, hxy, hxz], [0, 1, hyz], [0, 0, 1]], dtype=np.float64)
        a = rz @ ry @ rx @ sh @ np.diag(self.scale)
        return a, self.translation.copy()


def sample_affine(rng, ranges: AffineRanges) -> AffineParams:
    """Uniform draw within the given ranges; the linear part never flips."""
    rot = rng.uniform(-ranges.rot_rad, ranges.rot_rad, 3)
    scale = rng.uniform(ranges.scale_min, ranges.scale_max, 3)
    trans = rng.uniform(-ranges.trans_vox, ranges.trans_vox, 3)
    shear = rng.uniform(-ranges.shear, ranges.shear, 3)
    return AffineParams(rot, scale, trans, shear)


def _base_grid(shape):
    return np.indices(shape, dtype=np.float32)


def apply_affine(volume: Volume, params: AffineParams) -> Volume:
    """Resample through the inverse affine about the volume center (pull-back)."""
    if params.is_identity():
        return volume.copy()
    a, t = params.matrix()
    a_inv = np.linalg.inv(a)
    c = (np.asarray(volume.shape, dtype=np.float64) - 1.0) / 2.0
    grid = _base_grid(volume.shape).reshape(3, -1).astype(np.float64)
    pts = a_inv @ (grid - (c + t)[:, None]) + c[:, None]
    sampled = trilinear_gather(volume.grid, pts.astype(np.float32))
    return Volume(sampled.reshape(volume.shape), volume.spacing)


def warp_node(moving: Tensor, ddf: Tensor) -> Tensor:
    """Tape path: warp a (X,Y,Z) volume node by a (3,X,Y,Z) displacement node."""
    shape = moving.data.shape
    if ddf.data.shape != (3, *shape):
        raise ValueError(
            f"displacement grid {ddf.data.shape[1:]} does not match volume {shape}"
        )
    base = constant(_base_grid(shape), moving.tape)
    return trilinear_sample(moving, add(ddf, base))


def warp_volume(moving: Volume, ddf: DisplacementField) -> Volume:
    """Resample the moving image at p + u(p) for every fixed-grid voxel p."""
    if ddf.grid_shape != moving.shape:
        raise ValueError(
            f"displacement grid {ddf.grid_shape} does not match volume {moving.shape}"
        )
    pts = ddf.vectors + _base_grid(moving.shape)
    return Volume(trilinear_gather(moving.grid, pts), moving.spacing)


def warp_mask(mask: Volume, ddf: DisplacementField, threshold: float = 0.5) -> Volume:
    """Trilinear warp of a binary mask followed by >= threshold binarization."""
    if not mask.is_binary():
        raise ValueError("warp_mask expects a binary mask")
    warped = warp_volume(mask, ddf)
    return Volume((warped.grid >= threshold).astype(np.float32), mask.spacing)
