import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metareg.data import (
    VolumeIoError,
    gen_phantom_pair,
    load_case_pair,
    load_dataset,
    load_ddf,
    load_landmarks,
    load_volume,
    save_case_pair,
    save_ddf,
    save_landmarks,
    save_volume,
    split_dataset,
)
from metareg.losses import Landmark, LandmarkSet, dice
from metareg.transforms import DisplacementField, warp_mask
from metareg.volume import Volume


# --- phantom generation -------------------------------------------------------


def test_gen_phantom_pair_deterministic():
    a = gen_phantom_pair(np.random.SeedSequence([7, 0]), extent=16, deform_magnitude=1.0)
    b = gen_phantom_pair(np.random.SeedSequence([7, 0]), extent=16, deform_magnitude=1.0)
    np.testing.assert_array_equal(a.moving.image.grid, b.moving.image.grid)
    np.testing.assert_array_equal(a.fixed.image.grid, b.fixed.image.grid)
    np.testing.assert_array_equal(a.ground_truth_ddf.vectors, b.ground_truth_ddf.vectors)


def test_gen_phantom_pair_distinct_seeds_differ():
    a = gen_phantom_pair(np.random.SeedSequence([7, 0]), extent=16, deform_magnitude=1.0)
    b = gen_phantom_pair(np.random.SeedSequence([7, 1]), extent=16, deform_magnitude=1.0)
    assert np.abs(a.moving.image.grid - b.moving.image.grid).max() > 0.01


def test_gen_phantom_pair_structure():
    pair = gen_phantom_pair(np.random.SeedSequence(3), extent=16, deform_magnitude=1.0)
    assert pair.moving.image.shape == (16, 16, 16)
    assert pair.moving.image.grid.min() >= 0.0 and pair.moving.image.grid.max() <= 1.0
    assert pair.moving.gland_mask.is_binary()
    assert pair.fixed.gland_mask.is_binary()
    assert pair.moving.gland_mask.grid.sum() > 0
    assert pair.fixed.gland_mask.grid.sum() > 0
    assert len(pair.moving.landmarks) == 3
    assert {lm.name for lm in pair.moving.landmarks.landmarks} == {"centroid", "pole_pos", "pole_neg"}
    assert pair.ground_truth_ddf.grid_shape == (16, 16, 16)


def test_gen_phantom_zero_magnitude_is_identity():
    pair = gen_phantom_pair(np.random.SeedSequence(4), extent=16, deform_magnitude=0.0)
    assert not pair.ground_truth_ddf.vectors.any()
    np.testing.assert_array_equal(pair.fixed.image.grid, pair.moving.image.grid)
    np.testing.assert_array_equal(pair.fixed.gland_mask.grid, pair.moving.gland_mask.grid)


def test_gen_phantom_ground_truth_aligns_masks():
    pair = gen_phantom_pair(np.random.SeedSequence(5), extent=16, deform_magnitude=1.0)
    warped = warp_mask(pair.moving.gland_mask, pair.ground_truth_ddf)
    assert dice(warped, pair.fixed.gland_mask) == 1.0


def test_gen_phantom_amplitude_matches_request():
    pair = gen_phantom_pair(np.random.SeedSequence(6), extent=16, deform_magnitude=1.5)
    # smooth part is rescaled to the requested amplitude; the small affine
    # adds a little on top
    peak = np.abs(pair.ground_truth_ddf.vectors).max()
    assert 1.0 <= peak <= 2.5


def test_gen_phantom_validation():
    with pytest.raises(ValueError):
        gen_phantom_pair(np.random.SeedSequence(0), extent=10)
    with pytest.raises(ValueError):
        gen_phantom_pair(np.random.SeedSequence(0), extent=16, deform_magnitude=-1.0)


# --- splitting -------------------------------------------------------------------


def test_split_dataset_disjoint_and_deterministic():
    cases = list(range(28))
    train1, test1 = split_dataset(cases, 20 / 28, 7)
    train2, test2 = split_dataset(cases, 20 / 28, 7)
    assert train1 == train2 and test1 == test2
    assert len(train1) == 20 and len(test1) == 8
    assert set(train1).isdisjoint(test1)
    assert sorted(train1 + test1) == cases

    train3, _ = split_dataset(cases, 20 / 28, 8)
    assert train3 != train1  # seed changes the split


def test_split_dataset_validation():
    with pytest.raises(ValueError):
        split_dataset([1, 2, 3], 0.0, 0)
    with pytest.raises(ValueError):
        split_dataset([1, 2, 3], 1.0, 0)
    with pytest.raises(ValueError):
        split_dataset([1, 2], 0.1, 0)  # leaves train side empty


# --- volume / DDF / landmark I/O ----------------------------------------------------


def test_volume_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.standard_normal((5, 6, 7)).astype(np.float32), 0.8)
    prefix = str(tmp_path / "vol")
    save_volume(vol, prefix)
    loaded = load_volume(prefix)
    np.testing.assert_array_equal(loaded.grid, vol.grid)
    assert loaded.spacing == vol.spacing


def test_ddf_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    ddf = DisplacementField(rng.standard_normal((3, 4, 5, 6)).astype(np.float32))
    prefix = str(tmp_path / "ddf")
    save_ddf(ddf, prefix, 0.8)
    loaded = load_ddf(prefix)
    np.testing.assert_array_equal(loaded.vectors, ddf.vectors)


def test_landmarks_round_trip(tmp_path):
    lms = LandmarkSet(
        [
            Landmark("centroid", np.array([1.125, 2.25, 3.5]), 2.0),
            Landmark("pole_pos", np.array([-0.5, 0.0, 10.75]), 1.5),
        ]
    )
    path = str(tmp_path / "lms.txt")
    save_landmarks(lms, path)
    loaded = load_landmarks(path)
    assert len(loaded) == 2
    for a, b in zip(lms.landmarks, loaded.landmarks):
        assert a.name == b.name
        np.testing.assert_allclose(a.centroid_mm, b.centroid_mm, atol=5e-4)
        assert abs(a.radius_mm - b.radius_mm) < 5e-4


def test_volume_io_error_paths(tmp_path):
    rng = np.random.default_rng(2)
    vol = Volume(rng.standard_normal((4, 4, 4)).astype(np.float32), 0.8)
    prefix = str(tmp_path / "vol")
    save_volume(vol, prefix)

    with pytest.raises(VolumeIoError):
        load_volume(str(tmp_path / "missing"))

    blob = open(prefix + ".raw", "rb").read()
    with open(prefix + ".raw", "wb") as f:
        f.write(blob[:-8])
    with pytest.raises(VolumeIoError):
        load_volume(prefix)
    with open(prefix + ".raw", "wb") as f:
        f.write(blob + b"\x00\x00\x00\x00")
    with pytest.raises(VolumeIoError):
        load_volume(prefix)

    with open(prefix + ".raw", "wb") as f:
        f.write(blob)
    hdr = open(prefix + ".hdr").read()
    with open(prefix + ".hdr", "w") as f:
        f.write(hdr.replace("f32le", "f64le"))
    with pytest.raises(VolumeIoError):
        load_volume(prefix)


def test_malformed_landmark_record(tmp_path):
    path = str(tmp_path / "bad.txt")
    with open(path, "w") as f:
        f.write("name 1.0 2.0\n")
    with pytest.raises(VolumeIoError):
        load_landmarks(path)


def test_ddf_header_shape_check(tmp_path):
    rng = np.random.default_rng(3)
    vol = Volume(rng.standard_normal((4, 4, 4)).astype(np.float32), 0.8)
    prefix = str(tmp_path / "vol")
    save_volume(vol, prefix)
    with pytest.raises(VolumeIoError):
        load_ddf(prefix)  # 3 dims, not "3 X Y Z"


def test_case_pair_round_trip(tmp_path):
    pair = gen_phantom_pair(np.random.SeedSequence(9), extent=16, deform_magnitude=1.0)
    case_dir = str(tmp_path / "case_000")
    save_case_pair(pair, case_dir)
    loaded = load_case_pair(case_dir)
    np.testing.assert_array_equal(loaded.moving.image.grid, pair.moving.image.grid)
    np.testing.assert_array_equal(loaded.fixed.gland_mask.grid, pair.fixed.gland_mask.grid)
    np.testing.assert_array_equal(loaded.ground_truth_ddf.vectors, pair.ground_truth_ddf.vectors)
    assert len(loaded.moving.landmarks) == 3
    assert loaded.moving.provenance["deform_magnitude"] == "1.0"


def test_load_dataset_ordering_and_errors(tmp_path):
    for i in (1, 0):
        pair = gen_phantom_pair(np.random.SeedSequence(i), extent=16, deform_magnitude=0.5)
        save_case_pair(pair, str(tmp_path / f"case_{i:03d}"))
    cases = load_dataset(str(tmp_path))
    assert len(cases) == 2
    # ordered by directory name: case_000 first (generated from seed 0)
    ref = gen_phantom_pair(np.random.SeedSequence(0), extent=16, deform_magnitude=0.5)
    np.testing.assert_array_equal(cases[0].moving.image.grid, ref.moving.image.grid)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(VolumeIoError):
        load_dataset(str(empty))


@settings(max_examples=15, deadline=None)
@given(
    st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1)
)
def test_volume_round_trip_property(nx, ny, nz, seed, tmp_path_factory):
    rng = np.random.default_rng(seed)
    vol = Volume(rng.standard_normal((nx, ny, nz)).astype(np.float32), 0.8)
    prefix = str(tmp_path_factory.mktemp("vols") / "v")
    save_volume(vol, prefix)
    np.testing.assert_array_equal(load_volume(prefix).grid, vol.grid)
