"""Training losses (SSD similarity, bending energy) and evaluation metrics (DSC, TRE)."""

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor, add, mean, mul, square, sub
from .transforms import DisplacementField, warp_mask, warp_node
from .volume import Volume


@dataclass
class LossWeights:
    """Weight of the deformation regularizer relative to image similarity."""

    alpha: float = 10.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


# --- similarity -----------------------------------------------------------


def ssd_node(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("ssd requires matching grids")
    return mean(square(sub(a, b)))


def ssd(a: Volume, b: Volume) -> float:
    """Mean over voxels of the squared intensity difference."""
    if a.shape != b.shape:
        raise ValueError("ssd requires matching grids")
    d = a.grid.astype(np.float64) - b.grid.astype(np.float64)
    return float(np.mean(d * d))


# --- bending energy -------------------------------------------------------

# Second-derivative stencils on the interior, in voxel units. Offsets are
# per-axis shifts in {-1,0,+1}; mixed terms carry weight 2 in the energy.
_STENCILS = (
    (1.0, ((1.0, (1, 0, 0)), (-2.0, (0, 0, 0)), (1.0, (-1, 0, 0)))),
    (1.0, ((1.0, (0, 1, 0)), (-2.0, (0, 0, 0)), (1.0, (0, -1, 0)))),
    (1.0, ((1.0, (0, 0, 1)), (-2.0, (0, 0, 0)), (1.0, (0, 0, -1)))),
    (2.0, ((0.25, (1, 1, 0)), (-0.25, (1, -1, 0)), (-0.25, (-1, 1, 0)), (0.25, (-1, -1, 0)))),
    (2.0, ((0.25, (1, 0, 1)), (-0.25, (1, 0, -1)), (-0.25, (-1, 0, 1)), (0.25, (-1, 0, -1)))),
    (2.0, ((0.25, (0, 1, 1)), (-0.25, (0, 1, -1)), (-0.25, (0, -1, 1)), (0.25, (0, -1, -1)))),
)

_SHIFT = {-1: slice(None, -2), 0: slice(1, -1), 1: slice(2, None)}


def _stencil_slices(offsets):
    return (slice(None), _SHIFT[offsets[0]], _SHIFT[offsets[1]], _SHIFT[offsets[2]])


def _bending_forward(u):
    x, y, z = u.shape[1:]
    if min(x, y, z) < 3:
        raise ValueError("bending energy needs grid extent >= 3 per axis")
    n_int = (x - 2) * (y - 2) * (z - 2)
    norm = np.float32(1.0 / (3.0 * n_int))
    energy = np.float32(0.0)
    terms = []
    for weight, entries in _STENCILS:
        d = np.zeros((3, x - 2, y - 2, z - 2), dtype=np.float32)
        for coef, offsets in entries:
            d += np.float32(coef) * u[_stencil_slices(offsets)]
        terms.append(d)
        energy += np.float32(weight) * np.float32((d * d).sum(dtype=np.float32))
    return energy * norm, terms, norm


def bending_energy_node(ddf: Tensor) -> Tensor:
    """Mean squared second derivatives of the displacement field (interior stencil)."""
    energy, terms, norm = _bending_forward(ddf.data)

    def bwd(g):
        if not ddf.requires_grad:
            return
        gu = np.zeros_like(ddf.data)
        for (weight, entries), d in zip(_STENCILS, terms):
            cd = (np.float32(2.0 * weight) * norm * np.float32(g)) * d
            for coef, offsets in entries:
                gu[_stencil_slices(offsets)] += np.float32(coef) * cd
        ddf._accum(gu)

    return Tensor(energy, ddf.tape, ddf.requires_grad, bwd)


def bending_energy(ddf: DisplacementField) -> float:
    energy, _, _ = _bending_forward(ddf.vectors)
    return float(energy)


# --- combined training loss ----------------------------------------------


def total_loss_node(moving: Tensor, fixed: Tensor, ddf: Tensor, weights: LossWeights) -> Tensor:
    warped = warp_node(moving, ddf)
    loss = ssd_node(warped, fixed)
    if weights.alpha > 0:
        loss = add(loss, mul(bending_energy_node(ddf), weights.alpha))
    return loss


def total_loss(moving: Volume, fixed: Volume, ddf: DisplacementField, weights: LossWeights) -> float:
    from .transforms import warp_volume

    warped = warp_volume(moving, ddf)
    return ssd(warped, fixed) + weights.alpha * bending_energy(ddf)


# --- overlap --------------------------------------------------------------


def dice(a: Volume, b: Volume) -> float:
    """Dice overlap 2|A∩B|/(|A|+|B|); 1.0 when both masks are empty."""
    if a.shape != b.shape:
        raise ValueError("dice requires matching grids")
    if not a.is_binary() or not b.is_binary():
        raise ValueError("dice expects binary masks")
    na = float(a.grid.sum(dtype=np.float64))
    nb = float(b.grid.sum(dtype=np.float64))
    if na == 0.0 and nb == 0.0:
        return 1.0
    inter = float((a.grid * b.grid).sum(dtype=np.float64))
    return 2.0 * inter / (na + nb)


# --- landmarks and TRE ----------------------------------------------------


@dataclass
class Landmark:
    name: str
    centroid_mm: np.ndarray
    radius_mm: float = 2.0

    def __post_init__(self):
        self.centroid_mm = np.asarray(self.centroid_mm, dtype=np.float64)
        if self.radius_mm <= 0:
            raise ValueError("landmark radius must be positive")


@dataclass
class LandmarkSet:
    landmarks: list = field(default_factory=list)

    def by_name(self):
        return {lm.name: lm for lm in self.landmarks}

    def __len__(self):
        return len(self.landmarks)


@dataclass
class TreResult:
    tre_mm: float
    excluded: tuple = ()

    @property
    def n_excluded(self):
        return len(self.excluded)


def rasterize_landmark(lm: Landmark, shape, spacing: float) -> Volume:
    """Binary sphere of the landmark's radius around its centroid."""
    coords = np.indices(shape, dtype=np.float64) * spacing
    d2 = ((coords - lm.centroid_mm[:, None, None, None]) ** 2).sum(axis=0)
    return Volume((d2 <= lm.radius_mm**2).astype(np.float32), spacing)


def mask_centroid_mm(mask: Volume):
    idx = np.argwhere(mask.grid > 0)
    if idx.size == 0:
        return None
    return idx.mean(axis=0) * mask.spacing


def tre(
    moving_landmarks: LandmarkSet,
    fixed_landmarks: LandmarkSet,
    ddf: DisplacementField,
    spacing: float,
) -> TreResult:
    """RMS distance between warped moving landmark centroids and fixed centroids.

    Each moving landmark is rasterized to a sphere, warped through the
    displacement field, and its centroid recomputed in mm. Landmarks whose
    warped mask ends up empty are excluded and reported.
    """
    fixed_by_name = fixed_landmarks.by_name()
    sq_dists = []
    excluded = []
    for lm in moving_landmarks.landmarks:
        if lm.name not in fixed_by_name:
            raise ValueError(f"no fixed landmark paired with {lm.name!r}")
        sphere = rasterize_landmark(lm, ddf.grid_shape, spacing)
        warped = warp_mask(sphere, ddf)
        centroid = mask_centroid_mm(warped)
        if centroid is None:
            excluded.append(lm.name)
            continue
        diff = centroid - fixed_by_name[lm.name].centroid_mm
        sq_dists.append(float(diff @ diff))
    if not sq_dists:
        raise ValueError("all landmarks excluded; TRE undefined")
    return TreResult(float(np.sqrt(np.mean(sq_dists))), tuple(excluded))
