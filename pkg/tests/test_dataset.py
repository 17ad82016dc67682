import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doeforge.dataset import (
    Illuminant,
    SceneSpec,
    apply_illuminant,
    colorchecker_scene,
    generate_scene,
    load_hsdc,
    load_illuminants,
    read_hsdc,
    rescale_scene,
    save_hsdc,
)
from doeforge.imaging import HsdScene
from doeforge.optics import WavelengthSet, make_depths
from doeforge.psf import PsfStack

LAM = WavelengthSet.default()

# CIE D65 relative SPD (tabulated, 560 nm = 100)
D65_CIE = {420: 93.4318, 460: 117.812, 560: 100.0, 600: 90.0062, 650: 80.0268}


def cie_a(lam_nm):
    """Illuminant A from its Planckian definition (c2 = 1.435e7 nm K, T = 2848 K)."""
    c2, t = 1.435e7, 2848.0
    return 100 * (560 / lam_nm) ** 5 * np.expm1(c2 / (t * 560)) / np.expm1(c2 / (t * lam_nm))


class TestGenerateScene:
    def test_single_layer_constant_depth(self):
        s = generate_scene(SceneSpec(24, 24, layers=(1, 1), seed=4), LAM, (0.4, 2.0))
        assert np.unique(s.depth).size == 1
        assert s.domain == "reflectance" and s.valid_mask.min() == 1

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_ranges(self, seed):
        s = generate_scene(SceneSpec(24, 20, seed=seed), LAM, (0.4, 2.0))
        assert s.radiance.shape == (25, 24, 20)
        assert s.radiance.min() >= 0 and s.radiance.max() <= 1
        assert s.depth.min() >= np.float32(0.4) and s.depth.max() <= np.float32(2.0)
        assert 1 <= np.unique(s.depth).size <= 5

    def test_deterministic(self):
        a = generate_scene(SceneSpec(32, 32, seed=9), LAM, (0.4, 2.0))
        b = generate_scene(SceneSpec(32, 32, seed=9), LAM, (0.4, 2.0))
        assert np.array_equal(a.radiance, b.radiance) and np.array_equal(a.depth, b.depth)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SceneSpec(layers=(0, 2))

    def test_rescale_keeps_mask_full(self):
        s = generate_scene(SceneSpec(32, 32, seed=1), LAM, (0.4, 2.0))
        for f in (0.25, 0.5):
            r = rescale_scene(s, f)
            assert r.shape == (int(32 * f),) * 2
            assert r.valid_mask.min() == 1


class TestIlluminants:
    def test_shipped_set(self):
        ill = load_illuminants(wavelengths=LAM)
        assert set(ill) == {"D65", "A", "D50", "F2", "F7", "F11", "LED-RGB1"}
        for i in ill.values():
            assert i.spd.shape == (25,) and i.spd.min() >= 0 and i.spd.max() == 1.0

    def test_d65_matches_cie_table(self):
        ill = load_illuminants(wavelengths=WavelengthSet(tuple(float(k) for k in D65_CIE)))
        ref = np.array(list(D65_CIE.values()))
        np.testing.assert_allclose(ill["D65"].spd / ill["D65"].spd[2], ref / 100, rtol=1e-4)

    def test_a_matches_planck(self):
        lam = np.arange(420.0, 661.0, 10.0)
        spd = load_illuminants(wavelengths=WavelengthSet(tuple(lam)))["A"].spd
        ref = cie_a(lam)
        np.testing.assert_allclose(spd / spd[-1], ref / ref[-1], rtol=2e-3)

    def test_flat_illuminant(self):
        r = np.random.default_rng(0).random((4, 5, 5)) * 0.7
        out = apply_illuminant(r, Illuminant("flat", np.ones(4)))
        np.testing.assert_allclose(out, r / r.max(), rtol=1e-6)

    def test_zero_channel(self):
        out = apply_illuminant(np.full((3, 2, 2), 0.5), Illuminant("x", np.array([1.0, 0.0, 0.5])))
        assert not out[1].any()

    def test_d65_on_flat_reflector(self):
        d65 = load_illuminants(wavelengths=LAM)["D65"]
        out = apply_illuminant(np.full((25, 3, 3), 0.5), d65)
        np.testing.assert_allclose(out[:, 1, 1], d65.spd / d65.spd.max(), rtol=1e-6)

    @given(st.floats(0.1, 3.0), st.integers(0, 1000))
    def test_linear_without_rescale(self, k, seed):
        rng = np.random.default_rng(seed)
        r1, r2 = rng.random((3, 4, 4)), rng.random((3, 4, 4))
        ill = Illuminant("x", rng.random(3) + 0.1)
        lhs = apply_illuminant(r1 + k * r2, ill, rescale=False)
        rhs = apply_illuminant(r1, ill, rescale=False) + k * apply_illuminant(r2, ill, rescale=False)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-6)

    def test_mismatched_grid(self):
        with pytest.raises(ValueError):
            apply_illuminant(np.ones((3, 2, 2)), Illuminant("x", np.ones(4)))

    def test_invalid_spd(self):
        with pytest.raises(ValueError):
            Illuminant("x", np.zeros(3))
        with pytest.raises(ValueError):
            Illuminant("x", np.array([1.0, -0.1]))

    def test_user_csv(self, tmp_path):
        p = tmp_path / "ill.csv"
        p.write_text("wavelength_nm,E,ramp\n400,1,0\n700,1,3\n")
        ill = load_illuminants(p, WavelengthSet((400.0, 550.0, 700.0)))
        assert ill["E"].spd.tolist() == [1.0, 1.0, 1.0]
        assert ill["ramp"].spd.tolist() == [0.0, 0.5, 1.0]


class TestHsdc:
    def scene(self):
        s = generate_scene(SceneSpec(12, 10, seed=2), LAM, (0.4, 2.0))
        mask = np.ones(s.shape, np.float32)
        mask[0, :3] = 0
        return HsdScene(s.radiance, s.depth, mask, LAM, s.domain)

    def test_scene_round_trip(self, tmp_path):
        s = self.scene()
        save_hsdc(s, tmp_path / "s.hsdc")
        back = load_hsdc(tmp_path / "s.hsdc")
        assert np.array_equal(back.radiance, s.radiance)
        assert np.array_equal(back.depth, s.depth) and np.array_equal(back.valid_mask, s.valid_mask)
        assert back.wavelengths == s.wavelengths and back.domain == "reflectance"

    def test_byte_layout(self, tmp_path):
        cube = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        save_hsdc(cube, tmp_path / "c.hsdc")
        raw = (tmp_path / "c.hsdc").read_bytes()
        assert raw[:4] == b"HSDC"
        assert int.from_bytes(raw[4:8], "little") == 1
        n = int.from_bytes(raw[8:16], "little")
        assert np.array_equal(np.frombuffer(raw[16 + n :], "<f4"), cube.ravel())
        assert np.array_equal(load_hsdc(tmp_path / "c.hsdc"), cube)

    def test_psf_stack_round_trip(self, tmp_path):
        psfs = np.random.default_rng(1).random((3, 2, 5, 5)).astype(np.float32)
        st_ = PsfStack(psfs, WavelengthSet((450.0, 550.0, 650.0)), make_depths(0.5, 1.0, 2), 1e-5)
        save_hsdc(st_, tmp_path / "p.hsdc")
        back = load_hsdc(tmp_path / "p.hsdc")
        assert np.array_equal(np.asarray(back.psfs), psfs)
        assert back.depths == st_.depths and back.pitch_m == st_.pitch_m

    def test_errors(self, tmp_path):
        save_hsdc(self.scene(), tmp_path / "s.hsdc")
        raw = (tmp_path / "s.hsdc").read_bytes()
        (tmp_path / "magic").write_bytes(b"HSDX" + raw[4:])
        (tmp_path / "short").write_bytes(raw[:-4])
        (tmp_path / "long").write_bytes(raw + b"\0" * 4)
        with pytest.raises(ValueError, match="magic"):
            read_hsdc(tmp_path / "magic")
        with pytest.raises(ValueError, match="truncated payload"):
            read_hsdc(tmp_path / "short")
        with pytest.raises(ValueError, match="do not match"):
            read_hsdc(tmp_path / "long")

    def test_bad_version(self, tmp_path):
        save_hsdc(np.zeros((1, 2, 2), np.float32), tmp_path / "c.hsdc")
        raw = bytearray((tmp_path / "c.hsdc").read_bytes())
        raw[4:8] = (7).to_bytes(4, "little")
        (tmp_path / "v").write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            read_hsdc(tmp_path / "v")


class TestColorChecker:
    def write_csv(self, path, values):
        lam = [400, 500, 600, 700]
        rows = ["wavelength_nm," + ",".join(f"p{i}" for i in range(len(values)))]
        rows += [f"{l}," + ",".join(str(v) for v in values) for l in lam]
        path.write_text("\n".join(rows) + "\n")

    def test_white(self, tmp_path):
        self.write_csv(tmp_path / "cc.csv", [1.0] * 24)
        s = colorchecker_scene(tmp_path / "cc.csv", 1.2, patch_px=4)
        assert s.shape == (16, 24)
        assert np.all(s.radiance == 1.0) and np.all(s.depth == np.float32(1.2))

    def test_layout(self, tmp_path):
        vals = [i / 24 for i in range(24)]
        self.write_csv(tmp_path / "cc.csv", vals)
        s = colorchecker_scene(tmp_path / "cc.csv", 1.0, patch_px=5)
        for i, v in enumerate(vals):
            r, c = divmod(i, 6)
            block = s.radiance[:, r * 5 : (r + 1) * 5, c * 5 : (c + 1) * 5]
            assert np.all(block == np.float32(v))

    def test_wrong_count(self, tmp_path):
        self.write_csv(tmp_path / "cc.csv", [0.5] * 23)
        with pytest.raises(ValueError):
            colorchecker_scene(tmp_path / "cc.csv", 1.0)
