"""Synthetic phantom pairs with known labels/landmarks, dataset splitting, and file I/O."""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import trilinear_gather
from .losses import Landmark, LandmarkSet, mask_centroid_mm, rasterize_landmark
from .transforms import AffineParams, DisplacementField, warp_mask, warp_volume
from .volume import Volume


@dataclass
class PhantomCase:
    image: Volume
    gland_mask: Volume
    landmarks: LandmarkSet
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gland_mask.grid.sum() == 0:
            raise ValueError("gland mask must be nonempty")


@dataclass
class CasePair:
    moving: PhantomCase
    fixed: PhantomCase
    ground_truth_ddf: DisplacementField

    def __post_init__(self):
        if self.moving.image.shape != self.fixed.image.shape:
            raise ValueError("moving and fixed cases must share a grid")


# --- phantom generation ---------------------------------------------------


def _upsample_field(coarse, extent):
    """Corner-aligned trilinear resize of a (3,c,c,c) control grid to (3,E,E,E)."""
    c = coarse.shape[1]
    idx = np.arange(extent, dtype=np.float64) * ((c - 1) / (extent - 1))
    pts = np.stack(np.meshgrid(idx, idx, idx, indexing="ij")).astype(np.float32)
    return np.stack([trilinear_gather(coarse[i], pts) for i in range(3)])


def _gland_geometry(rng, extent):
    # resample a few times on degenerate draws, then clamp (small test extents)
    for _ in range(8):
        center = extent / 2.0 + rng.uniform(-2.0, 2.0, 3)
        axes = rng.uniform(0.22, 0.32, 3) * extent
        if axes.min() >= 3.0:
            return center, axes
    return center, np.maximum(axes, 3.0)


def gen_phantom_pair(seed, extent: int = 32, deform_magnitude: float = 2.0, spacing: float = 0.8) -> CasePair:
    """Random ellipsoidal-gland phantom plus a warped copy with known ground truth.

    The fixed case is the moving case resampled through a smooth random
    deformation (coarse 4^3 control grid of the given amplitude, trilinearly
    upsampled, composed with a small random affine), with the gland label and
    landmarks warped consistently. Pure function of the seed.
    """
    if extent % 4 != 0:
        raise ValueError("extent must be divisible by 4")
    if deform_magnitude < 0:
        raise ValueError("deform_magnitude must be >= 0")
    rng = np.random.default_rng(seed)
    center, axes = _gland_geometry(rng, extent)

    coords = np.indices((extent,) * 3, dtype=np.float64)
    r2 = (((coords - center[:, None, None, None]) / axes[:, None, None, None]) ** 2).sum(axis=0)
    mask = (r2 <= 1.0).astype(np.float32)

    noise = rng.standard_normal((extent,) * 3)
    tex = gaussian_filter(noise, 1.2)
    tex /= max(np.abs(tex).max(), 1e-12)
    soft = gaussian_filter(mask, 1.0)
    img = 0.15 + 0.55 * soft + 0.25 * tex
    img = (img - img.min()) / (img.max() - img.min())

    moving_img = Volume(img.astype(np.float32), spacing)
    moving_mask = Volume(mask, spacing)

    centroid_mm = mask_centroid_mm(moving_mask)
    longest = int(np.argmax(axes))
    pole = np.zeros(3)
    pole[longest] = 0.6 * axes[longest] * spacing
    landmarks = LandmarkSet(
        [
            Landmark("centroid", centroid_mm),
            Landmark("pole_pos", centroid_mm + pole),
            Landmark("pole_neg", centroid_mm - pole),
        ]
    )

    # ground-truth deformation: smooth coarse field + small affine. Heavy
    # smoothing plus rescaling keeps the amplitude at deform_magnitude while
    # keeping the bending energy low, so the true warp also has low total loss.
    coarse = rng.uniform(-1.0, 1.0, (3, 4, 4, 4)) * deform_magnitude
    u = _upsample_field(coarse.astype(np.float32), extent)
    u = np.stack([gaussian_filter(u[i], extent / 8.0) for i in range(3)]).astype(np.float32)
    peak = float(np.abs(u).max())
    if peak > 0.0:
        u *= np.float32(deform_magnitude / peak)

    mag = deform_magnitude
    affine = AffineParams(
        rotation=rng.uniform(-0.01, 0.01, 3) * mag,
        scale=1.0 + rng.uniform(-0.005, 0.005, 3) * mag,
        translation=rng.uniform(-0.25, 0.25, 3) * mag,
        shear=rng.uniform(-0.005, 0.005, 3) * mag,
    )
    a, t = affine.matrix()
    c = (extent - 1) / 2.0
    grid = coords.reshape(3, -1)
    u_aff = (a @ (grid - c) + c + t[:, None]) - grid
    u = u + u_aff.reshape(3, extent, extent, extent).astype(np.float32)

    gt = DisplacementField(u)
    fixed_img = warp_volume(moving_img, gt)
    fixed_mask = warp_mask(moving_mask, gt)
    if fixed_mask.grid.sum() == 0:
        raise ValueError("deformation pushed the gland out of the grid; lower deform_magnitude")

    fixed_lms = []
    for lm in landmarks.landmarks:
        sphere = rasterize_landmark(lm, (extent,) * 3, spacing)
        warped = warp_mask(sphere, gt)
        cen = mask_centroid_mm(warped)
        if cen is None:
            cen = lm.centroid_mm  # sphere left the grid; keep the unwarped centroid
        fixed_lms.append(Landmark(lm.name, cen, lm.radius_mm))

    prov = {"seed": seed, "deform_magnitude": deform_magnitude}
    moving = PhantomCase(moving_img, moving_mask, landmarks, dict(prov))
    fixed = PhantomCase(fixed_img, fixed_mask, LandmarkSet(fixed_lms), dict(prov))
    return CasePair(moving, fixed, gt)


def split_dataset(cases, train_fraction: float, seed: int):
    """Disjoint train/test split by case, deterministic in the seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be strictly between 0 and 1")
    n = len(cases)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError("split leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    train = [cases[i] for i in sorted(order[:n_train])]
    test = [cases[i] for i in sorted(order[n_train:])]
    return train, test


# --- file I/O -------------------------------------------------------------


class VolumeIoError(RuntimeError):
    pass


def _write_header(path, dims, spacing):
    with open(path, "w") as f:
        f.write(f"dims {' '.join(str(d) for d in dims)}\n")
        f.write(f"spacing_mm {spacing:.3f} {spacing:.3f} {spacing:.3f}\n")
        f.write("dtype f32le\n")
        f.write("order x-fastest\n")


def _read_header(path):
    if not os.path.exists(path):
        raise VolumeIoError(f"missing header file {path}")
    fields = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if parts:
                fields[parts[0]] = parts[1:]
    if fields.get("dtype") != ["f32le"]:
        raise VolumeIoError(f"unknown dtype {fields.get('dtype')} in {path}")
    if fields.get("order") != ["x-fastest"]:
        raise VolumeIoError(f"unknown storage order in {path}")
    dims = tuple(int(d) for d in fields["dims"])
    if any(d <= 0 for d in dims):
        raise VolumeIoError(f"non-positive dims in {path}")
    spacing = float(fields["spacing_mm"][0])
    return dims, spacing


def _read_blob(prefix, count):
    path = prefix + ".raw"
    if not os.path.exists(path):
        raise VolumeIoError(f"missing data file {path}")
    blob = open(path, "rb").read()
    if len(blob) < 4 * count:
        raise VolumeIoError(
            f"truncated data file {path}: {len(blob)} bytes, expected {4 * count}"
        )
    if len(blob) > 4 * count:
        raise VolumeIoError(
            f"header/data size mismatch for {path}: {len(blob)} bytes vs {4 * count} declared"
        )
    return np.frombuffer(blob, dtype="<f4")


def save_volume(vol: Volume, prefix: str):
    """Header + raw little-endian float32 blob, x-fastest. Round trip is bit-exact."""
    _write_header(prefix + ".hdr", vol.shape, vol.spacing)
    with open(prefix + ".raw", "wb") as f:
        f.write(vol.grid.ravel(order="F").astype("<f4").tobytes())


def load_volume(prefix: str) -> Volume:
    dims, spacing = _read_header(prefix + ".hdr")
    if len(dims) != 3:
        raise VolumeIoError(f"volume header must declare 3 dims, got {len(dims)}")
    flat = _read_blob(prefix, int(np.prod(dims)))
    return Volume(flat.reshape(dims, order="F"), spacing)


def save_ddf(ddf: DisplacementField, prefix: str, spacing: float = 0.8):
    _write_header(prefix + ".hdr", (3, *ddf.grid_shape), spacing)
    with open(prefix + ".raw", "wb") as f:
        for c in range(3):
            f.write(ddf.vectors[c].ravel(order="F").astype("<f4").tobytes())


def load_ddf(prefix: str) -> DisplacementField:
    dims, _ = _read_header(prefix + ".hdr")
    if len(dims) != 4 or dims[0] != 3:
        raise VolumeIoError(f"displacement header must declare dims 3 X Y Z, got {dims}")
    shape = dims[1:]
    flat = _read_blob(prefix, int(np.prod(dims)))
    per = int(np.prod(shape))
    vectors = np.stack(
        [flat[c * per : (c + 1) * per].reshape(shape, order="F") for c in range(3)]
    )
    return DisplacementField(vectors)


def save_landmarks(lms: LandmarkSet, path: str):
    with open(path, "w") as f:
        for lm in lms.landmarks:
            cx, cy, cz = lm.centroid_mm
            f.write(f"{lm.name} {cx:.3f} {cy:.3f} {cz:.3f} {lm.radius_mm:.3f}\n")


def load_landmarks(path: str) -> LandmarkSet:
    lms = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise VolumeIoError(f"malformed landmark record: {line!r}")
            lms.append(Landmark(parts[0], [float(v) for v in parts[1:4]], float(parts[4])))
    return LandmarkSet(lms)


# --- on-disk case layout --------------------------------------------------


def save_case_pair(pair: CasePair, case_dir: str):
    os.makedirs(case_dir, exist_ok=True)
    sp = pair.moving.image.spacing
    save_volume(pair.moving.image, os.path.join(case_dir, "moving_image"))
    save_volume(pair.moving.gland_mask, os.path.join(case_dir, "moving_mask"))
    save_landmarks(pair.moving.landmarks, os.path.join(case_dir, "moving_landmarks.txt"))
    save_volume(pair.fixed.image, os.path.join(case_dir, "fixed_image"))
    save_volume(pair.fixed.gland_mask, os.path.join(case_dir, "fixed_mask"))
    save_landmarks(pair.fixed.landmarks, os.path.join(case_dir, "fixed_landmarks.txt"))
    save_ddf(pair.ground_truth_ddf, os.path.join(case_dir, "gt_ddf"), sp)
    prov = pair.moving.provenance
    with open(os.path.join(case_dir, "provenance.txt"), "w") as f:
        for key, value in sorted(prov.items()):
            f.write(f"{key} {value}\n")


def load_case_pair(case_dir: str) -> CasePair:
    prov = {}
    prov_path = os.path.join(case_dir, "provenance.txt")
    if os.path.exists(prov_path):
        with open(prov_path) as f:
            for line in f:
                parts = line.split(None, 1)
                if parts:
                    prov[parts[0]] = parts[1].strip() if len(parts) > 1 else ""
    moving = PhantomCase(
        load_volume(os.path.join(case_dir, "moving_image")),
        load_volume(os.path.join(case_dir, "moving_mask")),
        load_landmarks(os.path.join(case_dir, "moving_landmarks.txt")),
        dict(prov),
    )
    fixed = PhantomCase(
        load_volume(os.path.join(case_dir, "fixed_image")),
        load_volume(os.path.join(case_dir, "fixed_mask")),
        load_landmarks(os.path.join(case_dir, "fixed_landmarks.txt")),
        dict(prov),
    )
    gt = load_ddf(os.path.join(case_dir, "gt_ddf"))
    return CasePair(moving, fixed, gt)


def load_dataset(data_dir: str):
    """All case pairs under data_dir, ordered by case directory name."""
    case_dirs = sorted(
        d for d in os.listdir(data_dir)
        if os.path.isdir(os.path.join(data_dir, d)) and d.startswith("case_")
    )
    if not case_dirs:
        raise VolumeIoError(f"no case directories found in {data_dir}")
    return [load_case_pair(os.path.join(data_dir, d)) for d in case_dirs]
