import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from doeforge.optics import (
    CameraConfig,
    CameraResponse,
    DispersionModel,
    HeightMap,
    PhaseMap,
    WavelengthSet,
    height_to_phase,
    make_depths,
    make_wavelengths,
    max_height,
    phase_to_height,
    quantize_height,
    refractive_index,
)
from oracles import cauchy


class TestGrids:
    def test_default_wavelengths(self):
        assert len(make_wavelengths(420, 660, 10)) == 25
        assert WavelengthSet.default().values[0] == 420 and WavelengthSet.default().values[-1] == 660

    def test_extended_range_has_27_channels(self):
        assert len(make_wavelengths(420, 680, 10)) == 27

    @pytest.mark.parametrize("args", [(500, 500, 10), (420, 660, 7), (420, 660, 0), (-1, 660, 10)])
    def test_bad_wavelength_ranges(self, args):
        with pytest.raises(ValueError):
            make_wavelengths(*args)

    def test_depths_reciprocal_linspace(self):
        d = make_depths(0.4, 2.0, 7)
        expected = 1.0 / np.linspace(2.5, 0.5, 7)
        np.testing.assert_allclose(d.array, expected, atol=1e-9, rtol=0)
        np.testing.assert_allclose(d.array, [0.4, 0.4615, 0.5455, 0.6667, 0.8571, 1.2, 2.0], atol=5e-5)

    def test_two_depths_are_the_endpoints(self):
        assert make_depths(0.4, 2.0, 2).depths_m == (0.4, 2.0)

    @pytest.mark.parametrize("args", [(1.0, 1.0, 7), (0.4, 2.0, 1), (0.0, 2.0, 3), (2.0, 0.4, 3)])
    def test_bad_depth_ranges(self, args):
        with pytest.raises(ValueError):
            make_depths(*args)

    @given(st.floats(0.1, 5.0), st.floats(1.01, 20.0), st.integers(2, 40))
    def test_disparities_uniform(self, zmin, ratio, n):
        disp = make_depths(zmin, zmin * ratio, n).disparities
        steps = np.diff(disp)
        assert np.max(np.abs(steps - steps.mean())) < 1e-12 * abs(steps.mean()) + 1e-12


class TestDispersion:
    def test_anchor(self):
        assert refractive_index(DispersionModel(), 546.1) == pytest.approx(1.5634, abs=0.002)

    def test_matches_cauchy_formula(self):
        m = DispersionModel()
        lam = np.linspace(400, 700, 31)
        np.testing.assert_allclose(refractive_index(m, lam), cauchy(lam, m.A, m.B, m.C), rtol=1e-15)

    def test_constant_model(self):
        m = DispersionModel(1.5, 0.0, 0.0)
        assert refractive_index(m, 450) == 1.5 and refractive_index(m, 650) == 1.5

    def test_normal_dispersion(self):
        m = DispersionModel()
        assert cauchy(420.0, m.A, m.B, m.C) > cauchy(660.0, m.A, m.B, m.C)
        assert refractive_index(m, 420) > refractive_index(m, 660)
        assert np.all(np.diff(refractive_index(m, np.linspace(400, 700, 301))) < 0)

    @pytest.mark.parametrize("lam", [399.0, 701.0])
    def test_out_of_range(self, lam):
        with pytest.raises(ValueError):
            refractive_index(DispersionModel(), lam)

    def test_must_exceed_one(self):
        with pytest.raises(ValueError):
            DispersionModel(0.9, 0.0, 0.0)

    def test_from_csv_recovers_coefficients(self, tmp_path):
        lam = np.linspace(400, 700, 16)
        eta = cauchy(lam, 1.52, 5000.0, 1e8)
        p = tmp_path / "eta.csv"
        p.write_text("wavelength_nm,value\n" + "\n".join(f"{a},{b}" for a, b in zip(lam, eta)))
        m = DispersionModel.from_csv(p)
        np.testing.assert_allclose([m.A, m.B, m.C], [1.52, 5000.0, 1e8], rtol=1e-6)


class TestPhaseHeight:
    def test_zero_and_full_wrap(self):
        m = DispersionModel()
        assert np.all(phase_to_height(PhaseMap(np.zeros((4, 4))), m).h == 0)
        assert np.all(phase_to_height(PhaseMap(np.full((4, 4), 2 * np.pi)), m).h == 0)

    def test_half_wave(self):
        h = phase_to_height(PhaseMap(np.full((3, 3), np.pi)), DispersionModel(1.5625, 0.0, 0.0)).h
        np.testing.assert_allclose(h, 275e-9 / 0.5625, rtol=1e-12)
        assert h[0, 0] == pytest.approx(488.9e-9, abs=0.05e-9)

    @given(arrays(np.float64, (5, 5), elements=st.floats(-100, 100)))
    def test_round_trip_at_design_wavelength(self, phi):
        m = DispersionModel()
        h = phase_to_height(PhaseMap(phi), m)
        assert np.all(h.h >= 0) and np.all(h.h < max_height(m))
        back = height_to_phase(h, 550.0, m)
        diff = np.angle(np.exp(1j * (back - phi)))
        assert np.max(np.abs(diff)) < 1e-9

    def test_zero_height_zero_phase(self):
        assert np.all(height_to_phase(HeightMap(np.zeros((2, 2)), 1e-6), 480, DispersionModel()) == 0)

    def test_wavelength_ratio(self):
        m = DispersionModel()
        h = HeightMap(np.full((2, 2), 300e-9), 1e-6)
        ratio = height_to_phase(h, 440, m) / height_to_phase(h, 660, m)
        expected = (660 / 440) * (cauchy(440.0, m.A, m.B, m.C) - 1) / (cauchy(660.0, m.A, m.B, m.C) - 1)
        np.testing.assert_allclose(ratio, expected, rtol=1e-12)

    def test_negative_height_rejected(self):
        with pytest.raises(ValueError):
            HeightMap(np.full((2, 2), -1e-9), 1e-6)


class TestQuantize:
    def test_examples(self):
        def q(v):
            return quantize_height(HeightMap(np.array([[v]]), 1e-6), 62, 21.5e-9).h[0, 0]

        assert q(0.0) == 0.0
        assert q(43.1e-9) == pytest.approx(43.0e-9, abs=1e-18)
        assert q(10e-6) == pytest.approx(61 * 21.5e-9, abs=1e-18)

    @given(arrays(np.float64, (4, 4), elements=st.floats(0, 2e-6)), st.integers(2, 80), st.floats(1e-9, 1e-7))
    def test_idempotent_and_on_grid(self, h, levels, step):
        once = quantize_height(HeightMap(h, 1e-6), levels, step)
        twice = quantize_height(once, levels, step)
        assert np.array_equal(once.h, twice.h)
        k = once.h / step
        assert np.allclose(k, np.round(k)) and k.max() <= levels - 1 + 1e-9

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            quantize_height(HeightMap(np.zeros((2, 2)), 1e-6), 1, 21.5e-9)


class TestCamera:
    def test_prototype_preset(self):
        cam = CameraConfig.prototype()
        assert cam.feature_grid_size == 375
        assert cam.feature_pitch_m == pytest.approx(8e-6)
        assert cam.focal_length_m == 50e-3 and cam.sensor_pixel_pitch_m == 6.22e-6

    def test_small_presets(self):
        desk, bench = CameraConfig.desk(), CameraConfig.bench()
        assert desk.feature_grid_size == 64 and desk.aperture_diameter_m == pytest.approx(1.024e-3)
        assert bench.feature_grid_size == 192 and bench.aperture_diameter_m == pytest.approx(1.536e-3)
        for cam in (desk, bench):
            assert cam.doe_grid_size * cam.doe_sample_pitch_m == pytest.approx(cam.aperture_diameter_m)

    def test_fft_pitch(self):
        cam = CameraConfig.desk(16, 9)
        assert cam.fft_pitch_m(500) == pytest.approx(500e-9 * 0.05 / (64 * 8e-6))

    @pytest.mark.parametrize(
        "kw",
        [
            {"psf_crop_px": 32},
            {"aperture_diameter_m": 1.0},
            {"focal_length_m": 0.0},
            {"doe_grid_size": 63},
        ],
    )
    def test_invariants(self, kw):
        with pytest.raises(ValueError):
            CameraConfig.desk(16, 9).with_(**kw)


class TestResponse:
    def test_default_rows_sum_to_one(self):
        r = CameraResponse.default()
        np.testing.assert_allclose(r.matrix.sum(axis=1), 1.0)
        assert r.matrix.shape == (3, 25)

    def test_rejects_dead_wavelength(self):
        m = np.ones((3, 4))
        m[:, 2] = 0
        with pytest.raises(ValueError):
            CameraResponse((1.0, 2.0, 3.0, 4.0), m)

    def test_rejects_dead_channel(self):
        m = np.ones((3, 4))
        m[1] = 0
        with pytest.raises(ValueError):
            CameraResponse((1.0, 2.0, 3.0, 4.0), m)

    def test_csv_round_trip(self, tmp_path):
        r = CameraResponse.default()
        p = tmp_path / "resp.csv"
        p.write_text("wavelength_nm,r,g,b\n" + "\n".join(f"{l},{a},{b},{c}" for l, (a, b, c) in zip(r.wavelengths_nm, r.matrix.T)))
        np.testing.assert_allclose(CameraResponse.from_csv(p).matrix, r.matrix, rtol=1e-12)

    def test_interpolation(self):
        r = CameraResponse.default()
        mid = r.at(425.0)
        np.testing.assert_allclose(mid, 0.5 * (r.matrix[:, 0] + r.matrix[:, 1]))
        assert math.isclose(r.on(r.wavelengths_nm).matrix[0, 0], r.matrix[0, 0])
