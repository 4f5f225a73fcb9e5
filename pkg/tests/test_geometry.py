import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlespirit.calibrate import CalibConfig, espirit_from_kspace
from dlespirit.geometry import (Geometry, compute_transformed_maps, grid_points, inverse_transform_point,
                                resample_volume_from_reference, resample_volume_to_reference,
                                rigid_transform_point, rotation_matrix)
from dlespirit.metrics import nrmse, pearson
from dlespirit.simulate import SimConfig, simulate_dataset

angles = st.floats(-180, 180, allow_nan=False)
shifts = st.floats(-20, 20, allow_nan=False)


def test_identity_transform_exact(rng):
    p = rng.standard_normal((10, 3))
    assert np.array_equal(rigid_transform_point(p, Geometry()), p)


def test_quarter_turn_about_z():
    out = rigid_transform_point(np.array([1.0, 0.0, 0.0]), Geometry(gamma=90.0))
    np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-15)


def test_pitch_plus_shift_matches_matrix_product():
    out = rigid_transform_point(np.array([0.0, 1.0, 0.0]), Geometry(alpha=90.0, t=1.0))
    np.testing.assert_allclose(out, [0.0, 0.0, 2.0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(a=angles, b=angles, c=angles)
def test_rotation_orthonormal(a, b, c):
    rot = rotation_matrix(Geometry(a, b, c))
    assert abs(np.linalg.det(rot) - 1) < 1e-12
    assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(a=angles, b=angles, c=angles, m=shifts, n=shifts, t=shifts)
def test_inverse_point_roundtrip(a, b, c, m, n, t):
    g = Geometry(a, b, c, m, n, t)
    p = np.array([[1.5, -2.0, 3.0], [0.0, 0.0, 0.0]])
    np.testing.assert_allclose(inverse_transform_point(rigid_transform_point(p, g), g), p, atol=1e-10)


def test_geometry_rejects_non_finite():
    with pytest.raises(ValueError):
        Geometry(alpha=float("nan"))


def test_geometry_meta_roundtrip():
    g = Geometry(1.0, -2.0, 3.5, 0.25, -1.0, 2.0)
    assert Geometry.from_meta(g.to_meta()) == g


def test_identity_resampling(rng):
    vol = rng.standard_normal((2, 4, 8, 8)) + 1j * rng.standard_normal((2, 4, 8, 8))
    out = resample_volume_to_reference(vol, Geometry())
    np.testing.assert_allclose(out, vol, atol=1e-12)
    assert out is not vol


def test_integer_slice_shift(rng):
    vol = rng.standard_normal((4, 6, 6))
    out = resample_volume_to_reference(vol, Geometry(t=1.0))
    np.testing.assert_allclose(out[1:], vol[:-1], atol=1e-12)
    assert not out[0].any()


def smooth_volume(shape=(8, 32, 32)):
    """Localized low-frequency volume whose slice profile vanishes just outside the slab."""
    nz = shape[0]
    pts = grid_points(shape)
    x, y = pts[..., 0], pts[..., 1]
    k = np.arange(nz)[:, None, None]
    return (np.sin(np.pi * (k + 1) / (nz + 1)) * np.exp(-(x ** 2 + y ** 2) / 50.0)
            * (1 + 0.3 * np.cos(2 * np.pi * x / 16)))


def test_roundtrip_smooth_volume():
    vol = smooth_volume()
    g = Geometry(2.0, -2.0, 5.0, 2.0, -2.0, 0.25)
    back = resample_volume_from_reference(resample_volume_to_reference(vol, g), g)
    assert nrmse(back, vol) < 0.05


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-10, 10), c=st.floats(-10, 10), m=st.floats(-4, 4), seed=st.integers(0, 1000))
def test_resampling_never_amplifies(a, c, m, seed):
    vol = np.random.default_rng(seed).standard_normal((4, 8, 8))
    out = resample_volume_to_reference(vol, Geometry(alpha=a, gamma=c, m=m))
    assert np.abs(out).max() <= np.abs(vol).max() + 1e-12


@pytest.fixture(scope="module")
def subject():
    return simulate_dataset(SimConfig(dims=(6, 4, 32, 32)), seed=5, geometry=Geometry())


def test_identity_transformed_maps_equal_original(subject):
    cfg = CalibConfig()
    orig = espirit_from_kspace(subject.kspace, cfg)
    trans = compute_transformed_maps(subject.kspace, Geometry(), cfg)
    assert trans.role == "transformed"
    np.testing.assert_allclose(trans.maps, orig.maps, atol=1e-8)
    np.testing.assert_allclose(trans.eigval, orig.eigval, atol=1e-8)


def test_small_pitch_keeps_maps_correlated(subject):
    cfg = CalibConfig()
    orig = espirit_from_kspace(subject.kspace, cfg)
    trans = compute_transformed_maps(subject.kspace, Geometry(alpha=2.0), cfg)
    for j in range(1, 5):
        support = (orig.eigval[j] > 0.9) & (trans.eigval[j] > 0.9)
        for c in range(4):
            assert pearson(trans.maps[j, c], orig.maps[j, c], support) > 0.95


def test_slices_without_data_get_zero_maps(subject):
    trans = compute_transformed_maps(subject.kspace, Geometry(t=2.0), CalibConfig())
    assert not trans.maps[:2].any() and not trans.eigval[:2].any()
    assert trans.eigval[2:].max() > 0.9
