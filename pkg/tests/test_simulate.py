import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlespirit.geometry import Geometry
from dlespirit.kspace import fft2c, ifft2c, rss_combine
from dlespirit.simulate import (GeometryRanges, SimConfig, make_phantom, max_gradient, sample_geometry,
                                simulate_acquisition, simulate_dataset, synth_coil_sensitivities)


def test_phantom_deterministic():
    a = make_phantom((4, 32, 32), seed=7)
    b = make_phantom((4, 32, 32), seed=7)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, make_phantom((4, 32, 32), seed=8))


def test_phantom_has_several_levels():
    vol = make_phantom((1, 32, 32), seed=0, style="ellipses")
    assert len(np.unique(np.round(vol, 12))) >= 3
    assert vol.min() >= 0 and vol.max() <= 1


def test_phantom_blobs_style_in_range():
    vol = make_phantom((2, 32, 32), seed=1, style="blobs")
    assert vol.max() <= 1 and (vol > 0).any()


def test_phantom_rejects_empty_support_and_bad_input():
    with pytest.raises(ValueError, match="empty support"):
        make_phantom((1, 32, 32), scale=0.0)
    with pytest.raises(ValueError):
        make_phantom((1, 4, 32))
    with pytest.raises(ValueError):
        make_phantom((1, 32, 32), style="checkerboard")


def test_single_uniform_coil_is_all_ones():
    coils = synth_coil_sensitivities(1, (2, 16, 16), uniform=True)
    np.testing.assert_array_equal(coils.sensitivities, np.ones((2, 1, 16, 16)))


@pytest.mark.parametrize("ncoils", [1, 4, 6, 8])
def test_coils_sum_of_squares_normalized(ncoils):
    sens = synth_coil_sensitivities(ncoils, (3, 32, 32), seed=ncoils).sensitivities
    np.testing.assert_allclose(np.sum(np.abs(sens) ** 2, axis=1), 1.0, atol=1e-10)


def test_coil_gradient_below_bound_by_scan():
    coils = synth_coil_sensitivities(4, (2, 32, 32), seed=3)
    sens = coils.sensitivities
    worst = 0.0
    for s in range(sens.shape[0]):
        for c in range(sens.shape[1]):
            for y in range(31):
                for x in range(31):
                    gx = sens[s, c, y, x + 1] - sens[s, c, y, x]
                    gy = sens[s, c, y + 1, x] - sens[s, c, y, x]
                    worst = max(worst, np.sqrt(abs(gx) ** 2 + abs(gy) ** 2))
    assert worst <= coils.grad_bound
    assert np.isclose(worst, max_gradient(sens))


def test_rough_coils_rejected():
    with pytest.raises(ValueError, match="too rough"):
        synth_coil_sensitivities(8, (1, 32, 32), smoothness=0.15, grad_bound=0.05)


def test_noise_free_single_uniform_coil_is_plain_fft():
    ph = make_phantom((2, 16, 16), seed=2)
    coils = synth_coil_sensitivities(1, (2, 16, 16), uniform=True)
    k = simulate_acquisition(ph, coils)
    np.testing.assert_array_equal(k[:, 0], fft2c(ph))


def test_noise_free_parseval():
    ph = make_phantom((2, 32, 32), seed=2)
    sens = synth_coil_sensitivities(4, (2, 32, 32), seed=9).sensitivities
    k = simulate_acquisition(ph, sens)
    direct = sum(np.sum(np.abs(ph * sens[:, i]) ** 2) for i in range(4))
    assert abs(np.sum(np.abs(k) ** 2) - direct) <= 1e-10 * direct


def test_noise_reproducible_and_scaled():
    ph = np.zeros((4, 32, 32))
    sens = synth_coil_sensitivities(4, (4, 32, 32), seed=1).sensitivities
    a = simulate_acquisition(ph, sens, 0.1, seed=5)
    b = simulate_acquisition(ph, sens, 0.1, seed=5)
    assert a.tobytes() == b.tobytes()
    assert abs(np.mean(np.abs(a) ** 2) - 0.01) < 0.001


def test_rss_of_normalized_coils_recovers_phantom():
    ph = make_phantom((3, 32, 32), seed=4)
    sens = synth_coil_sensitivities(6, (3, 32, 32), seed=2).sensitivities
    rss = rss_combine(ifft2c(simulate_acquisition(ph, sens)))
    support = ph > 0
    np.testing.assert_allclose(rss[support], ph[support], atol=1e-10)


def test_zero_ranges_give_identity():
    ranges = GeometryRanges(*[(0.0, 0.0)] * 6)
    assert sample_geometry(ranges, seed=3).is_identity()


def test_default_ranges_admit_extreme_cases():
    ranges = GeometryRanges()
    assert ranges.alpha[0] <= -10 <= ranges.alpha[1]
    assert ranges.admits(Geometry(alpha=-10.0))
    assert ranges.admits(Geometry(m=6.0, n=6.0, t=6.0))


def test_ranges_reject_inverted_interval():
    with pytest.raises(ValueError):
        GeometryRanges(alpha=(5.0, -5.0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_sampled_geometry_within_ranges(seed):
    ranges = GeometryRanges(alpha=(-3.0, 2.0), m=(0.0, 1.0))
    assert ranges.admits(sample_geometry(ranges, seed))


def test_dataset_deterministic():
    cfg = SimConfig(dims=(2, 4, 32, 32), noise_sigma=0.01)
    a = simulate_dataset(cfg, seed=11)
    b = simulate_dataset(cfg, seed=11)
    assert a.kspace.tobytes() == b.kspace.tobytes() and a.geometry == b.geometry
