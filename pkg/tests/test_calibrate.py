import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlespirit.calibrate import (CalibConfig, CalibrationError, CoilMaps, build_calibration_matrix, coil_compress,
                                 espirit_from_kspace, espirit_maps, normalize_map_phase, reference_channel)
from dlespirit.kspace import extract_acs, fft2c
from dlespirit.metrics import pearson
from dlespirit.simulate import make_phantom, simulate_acquisition, synth_coil_sensitivities

from .conftest import crandn


def test_calibration_matrix_hand_example():
    acs = np.arange(1, 10, dtype=float).reshape(1, 3, 3)
    expected = np.array([[1, 2, 4, 5], [2, 3, 5, 6], [4, 5, 7, 8], [5, 6, 8, 9]])
    np.testing.assert_array_equal(build_calibration_matrix(acs, 2), expected)


def test_calibration_matrix_window_enumeration(rng):
    acs = crandn(rng, 3, 7, 5)
    k = 3
    mat = build_calibration_matrix(acs, k)
    row = 0
    for wy in range(7 - k + 1):
        for wx in range(5 - k + 1):
            for i in range(3):
                for dy in range(k):
                    for dx in range(k):
                        assert mat[row, i * k * k + dy * k + dx] == acs[i, wy + dy, wx + dx]
            row += 1
    assert row == mat.shape[0]


def test_calibration_matrix_paper_scale_shape():
    assert build_calibration_matrix(np.zeros((6, 24, 128)), 6).shape == (19 * 123, 216)


def test_zero_acs_gives_zero_matrix_and_calibration_error():
    assert not build_calibration_matrix(np.zeros((2, 8, 8)), 3).any()
    with pytest.raises(CalibrationError):
        espirit_maps(np.zeros((1, 2, 8, 8)), (16, 16), CalibConfig(kernel_k=3))


def test_kernel_larger_than_acs_rejected():
    with pytest.raises(ValueError):
        build_calibration_matrix(np.zeros((2, 4, 8)), 6)


def white_object(rng, ny=32, nx=32):
    return crandn(rng, ny, nx)


def test_constant_coils_recovered_exactly(rng):
    x = white_object(rng)
    images = np.stack([0.6 * x, 0.8 * x])[None]
    maps = espirit_from_kspace(fft2c(images), CalibConfig())
    np.testing.assert_allclose(maps.maps[0, 0], 0.6, atol=1e-6)
    np.testing.assert_allclose(maps.maps[0, 1], 0.8, atol=1e-6)
    np.testing.assert_allclose(maps.eigval, 1.0, atol=1e-6)


def test_single_coil_is_unit_map(rng):
    x = white_object(rng)
    maps = espirit_from_kspace(fft2c(x[None, None]), CalibConfig())
    support = maps.eigval > 0.5
    assert support.all()
    np.testing.assert_allclose(np.abs(maps.maps[support[:, None]]), 1.0, atol=1e-8)
    np.testing.assert_allclose(maps.eigval, 1.0, atol=1e-6)


@pytest.fixture(scope="module")
def four_coil_slice():
    dims = (1, 32, 32)
    phantom = make_phantom(dims, seed=3)
    coils = synth_coil_sensitivities(4, dims, seed=12)
    return phantom, coils.sensitivities, simulate_acquisition(phantom, coils)


def test_smooth_profiles_match_ground_truth(four_coil_slice):
    phantom, sens, kspace = four_coil_slice
    maps = espirit_from_kspace(kspace, CalibConfig(kernel_k=6, acs_lines=24))
    support = phantom[0] > 0
    for c in range(4):
        assert pearson(maps.maps[0, c], sens[0, c], support) >= 0.99
    assert maps.eigval[0][support].min() >= 0.95


def test_maps_unit_norm_and_eigval_bounded(four_coil_slice):
    _, _, kspace = four_coil_slice
    maps = espirit_from_kspace(kspace)
    norms = np.sqrt(np.sum(np.abs(maps.maps) ** 2, axis=1))
    assert np.allclose(norms[maps.eigval > 1e-8], 1.0, atol=1e-8)
    assert maps.eigval.min() >= 0 and maps.eigval.max() <= 1 + 1e-6


def test_reference_channel_is_real_non_negative(four_coil_slice):
    _, _, kspace = four_coil_slice
    maps = espirit_from_kspace(kspace)
    ref = reference_channel(maps.maps)
    assert np.all(maps.maps[:, ref].imag == 0) and np.all(maps.maps[:, ref].real >= 0)


def test_eig_crop_zeroes_low_eigenvalue_pixels(four_coil_slice):
    _, _, kspace = four_coil_slice
    maps = espirit_from_kspace(kspace, CalibConfig(eig_crop=0.9))
    low = maps.eigval < 0.9
    assert low.any() and not maps.maps[:, :, low[0]].any()


@pytest.mark.parametrize("scale", [3.0, 1e-3, -2.0 + 0.5j, 1j])
def test_calibration_is_scale_invariant(four_coil_slice, scale):
    _, _, kspace = four_coil_slice
    acs = extract_acs(kspace, 24)
    a = espirit_maps(acs, (32, 32))
    b = espirit_maps(scale * acs, (32, 32))
    np.testing.assert_allclose(b.maps, a.maps, atol=1e-8)


def test_normalize_phase_example():
    m = np.array([0.6j, 0.8j]).reshape(2, 1, 1)
    np.testing.assert_allclose(normalize_map_phase(m, ref=1)[:, 0, 0], [0.6, 0.8], atol=1e-15)
    np.testing.assert_allclose(normalize_map_phase(m, ref=0)[:, 0, 0], [0.6, 0.8], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), nc=st.integers(1, 5))
def test_normalize_phase_idempotent_and_modulus_preserving(seed, nc):
    m = crandn(np.random.default_rng(seed), 2, nc, 4, 3)
    once = normalize_map_phase(m)
    np.testing.assert_allclose(np.abs(once), np.abs(m), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(normalize_map_phase(once), once, atol=1e-15)


def test_normalize_phase_keeps_coilmaps_type(rng):
    cm = CoilMaps(crandn(rng, 1, 2, 4, 4), np.ones((1, 4, 4)))
    out = normalize_map_phase(cm)
    assert isinstance(out, CoilMaps) and out.role == "reference"


def test_compress_drops_empty_channel(rng):
    k = np.zeros((1, 2, 8, 8), dtype=complex)
    k[:, 0] = crandn(rng, 1, 8, 8)
    out, energy = coil_compress(k, 1)
    ratio = out[0, 0] / k[0, 0]
    np.testing.assert_allclose(np.abs(ratio), 1.0, atol=1e-12)
    np.testing.assert_allclose(ratio, ratio.flat[0], atol=1e-12)
    assert energy == pytest.approx(1.0, abs=1e-15)


def test_compress_energy_matches_svd_oracle(rng):
    k = crandn(rng, 2, 4, 6, 5)
    data = np.concatenate([k[s].reshape(4, -1) for s in range(2)], axis=1)
    sv = np.linalg.svd(data, compute_uv=False)
    _, energy = coil_compress(k, 2)
    assert energy == pytest.approx(np.sum(sv[:2] ** 2) / np.sum(sv ** 2), rel=1e-12)


def test_compress_full_rank_keeps_signal_space(rng):
    k = crandn(rng, 1, 3, 6, 6)
    out, energy = coil_compress(k, 3)
    assert abs(energy - 1) < 1e-12
    a = k[0].reshape(3, -1)
    b = out[0].reshape(3, -1)
    proj = a @ np.linalg.pinv(b) @ b
    np.testing.assert_allclose(proj, a, atol=1e-10)


def test_compress_rejects_bad_target(rng):
    with pytest.raises(ValueError):
        coil_compress(crandn(rng, 1, 3, 4, 4), 4)
