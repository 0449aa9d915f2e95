import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metareg.core import Tape, Tensor, constant, mean, square
from metareg.transforms import (
    AffineParams,
    AffineRanges,
    DisplacementField,
    apply_affine,
    sample_affine,
    warp_mask,
    warp_node,
    warp_volume,
)
from metareg.volume import Volume
from reference import fd_directional, ref_warp


def rel_err(got, want):
    return abs(got - want) / max(abs(want), 1e-8)


# --- DisplacementField ----------------------------------------------------------


def test_displacement_field_validation():
    DisplacementField(np.zeros((3, 4, 4, 4), np.float32))
    with pytest.raises(ValueError):
        DisplacementField(np.zeros((2, 4, 4, 4), np.float32))
    with pytest.raises(ValueError):
        DisplacementField(np.zeros((3, 4, 4), np.float32))


def test_zero_field_constructor():
    z = DisplacementField.zero((3, 4, 5))
    assert z.grid_shape == (3, 4, 5)
    assert not z.vectors.any()


# --- affine parameters ------------------------------------------------------------


def test_identity_affine_matrix():
    a, t = AffineParams.identity().matrix()
    np.testing.assert_allclose(a, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t, 0.0)
    assert AffineParams.identity().is_identity()


def test_affine_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        AffineParams(np.zeros(3), [1.0, 0.0, 1.0], np.zeros(3), np.zeros(3))


def test_affine_matrix_determinant_positive():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = sample_affine(rng, AffineRanges())
        a, _ = p.matrix()
        assert np.linalg.det(a) > 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sample_affine_within_ranges(seed):
    rng = np.random.default_rng(seed)
    r = AffineRanges(rot_rad=0.2, scale_min=0.8, scale_max=1.2, trans_vox=3.0, shear=0.1)
    p = sample_affine(rng, r)
    assert (np.abs(p.rotation) <= 0.2).all()
    assert ((p.scale >= 0.8) & (p.scale <= 1.2)).all()
    assert (np.abs(p.translation) <= 3.0).all()
    assert (np.abs(p.shear) <= 0.1).all()


def test_apply_affine_identity_is_exact_copy():
    rng = np.random.default_rng(3)
    vol = Volume(rng.random((6, 6, 6)).astype(np.float32), 0.8)
    out = apply_affine(vol, AffineParams.identity())
    np.testing.assert_array_equal(out.grid, vol.grid)
    assert out.grid is not vol.grid


def test_apply_affine_integer_translation_shifts_content():
    rng = np.random.default_rng(4)
    vol = Volume(rng.random((8, 8, 8)).astype(np.float32), 0.8)
    p = AffineParams(np.zeros(3), np.ones(3), [2.0, 0.0, 0.0], np.zeros(3))
    out = apply_affine(vol, p)
    # pull-back convention: output(x) = input(x - t) for pure translation
    np.testing.assert_allclose(out.grid[2:], vol.grid[:-2], rtol=1e-5, atol=1e-6)


def test_apply_affine_disabled_ranges_sample_identity():
    rng = np.random.default_rng(5)
    p = sample_affine(rng, AffineRanges.disabled())
    assert p.is_identity()


# --- warping -----------------------------------------------------------------------


def test_warp_volume_zero_field_is_identity():
    rng = np.random.default_rng(6)
    vol = Volume(rng.random((5, 6, 7)).astype(np.float32), 0.8)
    out = warp_volume(vol, DisplacementField.zero(vol.shape))
    np.testing.assert_array_equal(out.grid, vol.grid)


def test_warp_volume_integer_shift():
    rng = np.random.default_rng(7)
    vol = Volume(rng.random((8, 8, 8)).astype(np.float32), 0.8)
    u = np.zeros((3, 8, 8, 8), np.float32)
    u[0] = 1.0  # out(p) = moving(p + x_hat)
    out = warp_volume(vol, DisplacementField(u))
    np.testing.assert_allclose(out.grid[:-1], vol.grid[1:], rtol=1e-5, atol=1e-6)


def test_warp_volume_matches_reference():
    rng = np.random.default_rng(8)
    vol = Volume(rng.random((6, 6, 6)).astype(np.float32), 0.8)
    u = (0.8 * rng.standard_normal((3, 6, 6, 6))).astype(np.float32)
    out = warp_volume(vol, DisplacementField(u))
    np.testing.assert_allclose(out.grid, ref_warp(vol.grid, u), rtol=1e-4, atol=1e-5)


def test_warp_volume_shape_mismatch():
    vol = Volume(np.zeros((4, 4, 4), np.float32), 0.8)
    with pytest.raises(ValueError):
        warp_volume(vol, DisplacementField.zero((5, 5, 5)))


def test_warp_mask_stays_binary_and_requires_binary():
    rng = np.random.default_rng(9)
    mask = Volume((rng.random((6, 6, 6)) > 0.5).astype(np.float32), 0.8)
    u = (0.5 * rng.standard_normal((3, 6, 6, 6))).astype(np.float32)
    out = warp_mask(mask, DisplacementField(u))
    assert set(np.unique(out.grid)) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        warp_mask(Volume(rng.random((4, 4, 4)).astype(np.float32), 0.8), DisplacementField.zero((4, 4, 4)))


def test_warp_mask_all_ones_interior_stays_one():
    mask = Volume(np.ones((8, 8, 8), np.float32), 0.8)
    u = (0.3 * np.random.default_rng(10).standard_normal((3, 8, 8, 8))).astype(np.float32)
    out = warp_mask(mask, DisplacementField(u))
    assert (out.grid[1:-1, 1:-1, 1:-1] == 1.0).all()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_warp_node_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mov_val = rng.random((6, 6, 6)).astype(np.float32)
    fix_val = rng.random((6, 6, 6)).astype(np.float32)
    u_val = (0.5 * rng.standard_normal((3, 6, 6, 6))).astype(np.float32)

    tape = Tape()
    u = Tensor(u_val, tape)
    loss = mean(square(warp_node(constant(mov_val, tape), u) - constant(fix_val, tape)))
    tape.backward(loss)

    def f(flat):
        w = ref_warp(mov_val, flat.reshape(u_val.shape))
        return float(np.mean((w - fix_val.astype(np.float64)) ** 2))

    d = rng.standard_normal(u_val.size)
    fd, d = fd_directional(f, u_val.reshape(-1), d)
    analytic = float(u.grad.reshape(-1).astype(np.float64) @ d)
    assert rel_err(analytic, fd) < 1e-4


def test_warp_node_shape_check():
    tape = Tape()
    mov = constant(np.zeros((4, 4, 4), np.float32), tape)
    u = constant(np.zeros((3, 5, 5, 5), np.float32), tape)
    with pytest.raises(ValueError):
        warp_node(mov, u)


# --- Volume ---------------------------------------------------------------------


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4), np.float32), 0.8)
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4, 4), np.float32), 0.0)
    v = Volume(np.zeros((4, 4, 4), np.float32), 0.8)
    assert v.is_binary()
    assert not Volume(np.full((4, 4, 4), 0.5, np.float32), 0.8).is_binary()
