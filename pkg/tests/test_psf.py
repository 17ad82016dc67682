import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from doeforge.doe import fresnel_phase
from doeforge.optics import CameraConfig, DepthSet, HeightMap, WavelengthSet, make_depths, phase_to_height
from doeforge.psf import (
    Psf,
    aperture_mask,
    circular_mask,
    doe_phase_from_phase_map,
    fourier_intensity,
    normalize_psf,
    phase_map_stack,
    psf_from_doe_phase,
    psf_stack,
    pupil_field,
    resample_to_sensor,
    simulate_psf,
)
from oracles import direct_diffraction, fresnel_field


def tilt_camera():
    # fine aperture sampling so an 8 degree tilt stays inside the Fourier-plane support
    return CameraConfig(
        focal_length_m=0.05,
        sensor_pixel_pitch_m=50e-6,
        doe_sample_pitch_m=1e-6,
        doe_grid_size=256,
        aperture_diameter_m=256e-6,
        psf_crop_px=15,
        feature_upsample=1,
    )


class TestAperture:
    def test_large_aperture_is_all_ones(self):
        n, pitch = 32, 1e-6
        assert np.all(circular_mask(n, pitch, math.sqrt(2) * n * pitch) == 1)

    def test_center_is_open(self):
        m = aperture_mask(CameraConfig.desk(16, 9))
        assert m[15, 15] == 1 and m[16, 16] == 1 and m[0, 0] == 0

    def test_area_fraction_at_prototype_scale(self):
        cam = CameraConfig.prototype()
        frac = aperture_mask(cam).mean()
        expected = math.pi / 4 * (cam.aperture_diameter_m / (cam.doe_grid_size * cam.doe_sample_pitch_m)) ** 2
        assert abs(frac - expected) / expected < 0.02


class TestOracle:
    @pytest.mark.parametrize("lam,z", [(550.0, 1 / 1.5), (430.0, 0.4), (650.0, 2.0)])
    def test_direct_summation_64(self, desk_small, lam, z):
        cam = desk_small
        n = cam.doe_grid_size
        assert n == 64
        rng = np.random.default_rng(1)
        doe = rng.uniform(0, 2 * np.pi, (n, n))
        field = pupil_field(torch.from_numpy(doe), cam, lam, z)
        got = fourier_intensity(field, cam).numpy()
        npad = cam.padded_size
        pos = (np.arange(npad) - npad // 2) * cam.fft_pitch_m(lam)
        sel = slice(npad // 2 - 24, npad // 2 + 24)
        ref_field = fresnel_field(n, cam.doe_sample_pitch_m, lam, z, cam.focal_length_m, doe, cam.aperture_diameter_m)
        ref = direct_diffraction(ref_field, cam.doe_sample_pitch_m, lam, cam.focal_length_m, pos[sel], npad)
        peak = got.max()
        assert np.max(np.abs(got[sel, sel] - ref)) <= 1e-4 * peak


class TestSimulate:
    def test_fresnel_in_focus(self):
        cam = CameraConfig.bench()
        z0 = 1 / 1.5
        phase = torch.from_numpy(fresnel_phase(cam, 550.0, z0).phi.copy())
        doe = doe_phase_from_phase_map(phase, cam, 550.0)
        inten = fourier_intensity(pupil_field(doe, cam, 550.0, z0), cam)
        crop = resample_to_sensor(inten, cam.fft_pitch_m(550.0), cam)
        assert float(crop.sum() / inten.sum()) >= 0.9
        c = cam.psf_crop_px // 2
        assert np.unravel_index(int(crop.argmax()), crop.shape) == (c, c)

    def test_unit_sum_and_nonnegative(self, desk_small):
        h = HeightMap(np.zeros((16, 16)), desk_small.feature_pitch_m)
        p = simulate_psf(h, desk_small, 500.0, 0.8)
        assert np.all(p.intensity >= 0)
        assert abs(p.intensity.sum() - 1) < 1e-9

    def test_errors(self, desk_small):
        h = HeightMap(np.zeros((16, 16)), desk_small.feature_pitch_m)
        with pytest.raises(ValueError):
            simulate_psf(h, desk_small, 500.0, 0.0)
        with pytest.raises(ValueError):
            simulate_psf(h, desk_small, 750.0, 1.0)

    def test_tilt_translates_along_chief_ray(self):
        cam = tilt_camera()
        # wavelength at which f*sin(8 deg) is exactly 130 FFT bins
        lam = math.sin(math.radians(8.0)) * cam.padded_size * cam.doe_sample_pitch_m / 130 * 1e9
        doe = torch.zeros((256, 256), dtype=torch.float64)
        on_axis = psf_from_doe_phase(doe, cam, lam, 1.0).numpy()
        tilted = psf_from_doe_phase(doe, cam, lam, 1.0, angle_deg=8.0).numpy()
        np.testing.assert_allclose(tilted, on_axis, atol=1e-9)
        # off-grid wavelength: same PSF up to interpolation error
        a = psf_from_doe_phase(doe, cam, 550.0, 1.0).numpy()
        b = psf_from_doe_phase(doe, cam, 550.0, 1.0, angle_deg=8.0).numpy()
        assert np.abs(a - b).sum() < 0.15
        shift = cam.focal_length_m * math.sin(math.radians(8.0))
        inten = fourier_intensity(pupil_field(doe, cam, 550.0, 1.0, 8.0), cam)
        wide = resample_to_sensor(inten, cam.fft_pitch_m(550.0), cam, size=15, origin_m=(shift, 0.0))
        np.testing.assert_allclose((wide / wide.sum()).numpy(), b, atol=1e-12)

    def test_defocus_is_radially_symmetric(self):
        # small aperture on a zero-padded grid so the defocus spot is resolved
        cam = CameraConfig(
            focal_length_m=0.05,
            sensor_pixel_pitch_m=12e-6,
            doe_sample_pitch_m=4e-6,
            doe_grid_size=256,
            aperture_diameter_m=512e-6,
            psf_crop_px=33,
            feature_upsample=1,
        )
        h = HeightMap(np.zeros((256, 256)), cam.feature_pitch_m)
        a = simulate_psf(h, cam, 550.0, 0.5).intensity
        b = simulate_psf(h, cam, 550.0, 2.0).intensity
        assert np.abs(a - b).max() > 1e-3 * a.max()
        for p in (a, b):
            assert angular_residual(p) <= 0.01


def angular_residual(p, bin_px=0.25):
    """RMS deviation from the angular average inside the inscribed disc, relative."""
    k = p.shape[0]
    yy, xx = np.mgrid[:k, :k] - (k - 1) / 2
    r = np.hypot(xx, yy).ravel()
    b = np.floor(r / bin_px).astype(int)
    n = np.bincount(b)
    ok = n > 0
    r_mean = np.bincount(b, r)[ok] / n[ok]
    p_mean = np.bincount(b, p.ravel())[ok] / n[ok]
    sym = np.interp(r, r_mean, p_mean).reshape(p.shape)
    inside = r.reshape(p.shape) <= (k - 1) / 2
    return np.sqrt(np.mean((p - sym)[inside] ** 2)) / np.sqrt(np.mean(p[inside] ** 2))


class TestVariants:
    def test_printed_scene_term_variant_differs(self, desk_small):
        h = HeightMap(np.zeros((16, 16)), desk_small.feature_pitch_m)
        a = simulate_psf(h, desk_small, 550.0, 0.5).intensity
        b = simulate_psf(h, desk_small.with_(scene_phase_half=False), 550.0, 0.5).intensity
        assert not np.allclose(a, b)


class TestProperties:
    def test_parseval(self, desk_small):
        rng = np.random.default_rng(0)
        doe = torch.from_numpy(rng.uniform(0, 6, (64, 64)))
        field = pupil_field(doe, desk_small, 480.0, 0.7)
        inten = fourier_intensity(field, desk_small)
        aperture_energy = float((field.abs() ** 2).sum())
        assert abs(float(inten.sum()) - aperture_energy) <= 1e-6 * aperture_energy

    def test_global_phase_invariance(self, desk_small):
        rng = np.random.default_rng(2)
        doe = torch.from_numpy(rng.uniform(0, 6, (64, 64)))
        a = psf_from_doe_phase(doe, desk_small, 520.0, 0.9)
        b = psf_from_doe_phase(doe + 1.234, desk_small, 520.0, 0.9)
        assert float((a - b).abs().max()) < 1e-9

    def test_linear_phase_shifts_psf(self):
        cam = tilt_camera()
        x = (np.arange(256) - 127.5) * 1e-6
        k = 2 * np.pi / 550e-9
        s = 2e-3  # -> 100 um on the sensor, two pixels
        tilt = torch.from_numpy(np.tile(k * s * x, (256, 1)))
        base = psf_from_doe_phase(torch.zeros((256, 256), dtype=torch.float64), cam, 550.0, 1.0).numpy()
        moved = psf_from_doe_phase(tilt, cam, 550.0, 1.0, origin_m=(0.0, 0.0)).numpy()
        xs = np.arange(15) - 7
        cx_base = (base.sum(0) * xs).sum()
        cx_moved = (moved.sum(0) * xs).sum()
        assert abs((cx_moved - cx_base) - cam.focal_length_m * s / cam.sensor_pixel_pitch_m) < 1.0


class TestResample:
    def test_identity_at_unit_ratio(self):
        cam = CameraConfig.desk(16, 9).with_(sensor_pixel_pitch_m=5e-6)
        rng = np.random.default_rng(3)
        img = torch.from_numpy(rng.random((9, 9)))
        out = resample_to_sensor(img, 5e-6, cam, size=9)
        np.testing.assert_allclose(out.numpy(), img.numpy(), rtol=1e-12)

    def test_uniform_field(self):
        cam = CameraConfig.desk(16, 9).with_(sensor_pixel_pitch_m=7e-6)
        img = torch.ones((64, 64), dtype=torch.float64)
        out = resample_to_sensor(img, 5e-6, cam, size=33).numpy()
        assert np.ptp(out) < 1e-12
        # a window covering the whole support keeps the total energy
        full = resample_to_sensor(img, 5e-6, cam, size=45)
        assert abs(float(full.sum()) - 64 * 64) < 1e-6 * 64 * 64 or full.shape[0] * 7e-6 > 64 * 5e-6

    def test_delta_coarser_output(self):
        cam = CameraConfig.desk(16, 9).with_(sensor_pixel_pitch_m=2e-6)
        img = torch.zeros((33, 33), dtype=torch.float64)
        img[16, 16] = 1.0
        out = resample_to_sensor(img, 1e-6, cam, size=15)
        assert int((out > 0).sum()) <= 4
        assert abs(float(out.sum()) - 1.0) < 1e-6

    def test_window_too_large(self):
        cam = CameraConfig.desk(16, 9).with_(sensor_pixel_pitch_m=1e-5)
        with pytest.raises(ValueError):
            resample_to_sensor(torch.ones((16, 16), dtype=torch.float64), 1e-6, cam, size=9)


class TestNormalize:
    def test_uniform(self):
        p = normalize_psf(Psf(np.ones((5, 5)), 500, 1.0))
        np.testing.assert_allclose(p.intensity, 1 / 25)

    @given(arrays(np.float64, (6, 6), elements=st.floats(0, 10)))
    def test_unit_sum(self, a):
        if a.sum() <= 0:
            with pytest.raises(ValueError):
                normalize_psf(Psf(a, 500, 1.0))
            return
        p = normalize_psf(Psf(a, 500, 1.0))
        assert abs(p.intensity.sum() - 1) < 1e-9
        again = normalize_psf(p)
        np.testing.assert_allclose(again.intensity, p.intensity, atol=1e-12)


class TestStack:
    def test_counts_and_determinism(self, desk_small):
        h = phase_to_height(fresnel_phase(desk_small, 550.0, 0.8), desk_small.dispersion, desk_small.feature_pitch_m)
        lam, z = WavelengthSet.default(), DepthSet.default()
        a = psf_stack(h, desk_small, lam, z)
        assert len(a) == 175
        b = psf_stack(h, desk_small, lam, z, jobs=4)
        assert np.array_equal(a.psfs, b.psfs)
        one = psf_stack(h, desk_small, WavelengthSet((510.0,)), DepthSet((0.6,)))
        assert np.array_equal(one.psfs[0, 0], simulate_psf(h, desk_small, 510.0, 0.6).intensity)

    def test_height_and_phase_routes_agree(self, desk_small):
        phase = fresnel_phase(desk_small, 550.0, 0.8)
        h = phase_to_height(phase, desk_small.dispersion, desk_small.feature_pitch_m)
        lam, z = WavelengthSet((450.0, 600.0)), make_depths(0.5, 1.5, 2)
        np.testing.assert_allclose(psf_stack(h, desk_small, lam, z).psfs, phase_map_stack(phase, desk_small, lam, z).psfs, atol=1e-10)
