"""Physical types shared by every stage: spectral/depth grids, dispersion,
camera geometry and the phase <-> height conversions of the DOE."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

DESIGN_WAVELENGTH_NM = 550.0
DISPERSION_RANGE_NM = (400.0, 700.0)
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class WavelengthSet:
    """Strictly increasing wavelengths in nm."""

    values: tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("WavelengthSet needs at least one wavelength")
        if np.any(v <= 0):
            raise ValueError("wavelengths must be positive")
        if np.any(np.diff(v) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        object.__setattr__(self, "values", tuple(float(x) for x in v))

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @classmethod
    def default(cls) -> "WavelengthSet":
        return make_wavelengths(420, 660, 10)


@dataclass(frozen=True)
class DepthSet:
    """Depth levels (m) uniformly spaced in disparity."""

    depths_m: tuple[float, ...]

    def __post_init__(self):
        d = np.asarray(self.depths_m, dtype=float)
        if d.ndim != 1 or d.size == 0:
            raise ValueError("DepthSet needs at least one depth")
        if np.any(d <= 0):
            raise ValueError("depths must be positive")
        if np.any(np.diff(d) <= 0):
            raise ValueError("depths must be strictly increasing")
        object.__setattr__(self, "depths_m", tuple(float(x) for x in d))

    def __len__(self):
        return len(self.depths_m)

    def __iter__(self):
        return iter(self.depths_m)

    def __getitem__(self, i):
        return self.depths_m[i]

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.depths_m, dtype=float)

    @property
    def disparities(self) -> np.ndarray:
        return 1.0 / self.array

    @property
    def z_min(self) -> float:
        return self.depths_m[0]

    @property
    def z_max(self) -> float:
        return self.depths_m[-1]

    @classmethod
    def default(cls) -> "DepthSet":
        return make_depths(0.4, 2.0, 7)


def make_wavelengths(min_nm: float, max_nm: float, step_nm: float) -> WavelengthSet:
    """Inclusive uniform wavelength grid, e.g. ``(420, 660, 10)`` -> 25 samples."""
    if min_nm <= 0 or max_nm <= 0 or step_nm <= 0:
        raise ValueError("wavelength range and step must be positive")
    if not min_nm < max_nm:
        raise ValueError(f"empty wavelength range [{min_nm}, {max_nm}]")
    n = (max_nm - min_nm) / step_nm
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"step {step_nm} nm does not divide [{min_nm}, {max_nm}]")
    n = int(round(n))
    return WavelengthSet(tuple(min_nm + i * step_nm for i in range(n + 1)))


def make_depths(z_min_m: float, z_max_m: float, count: int) -> DepthSet:
    """Depths whose reciprocals are linearly spaced between 1/z_min and 1/z_max."""
    if count < 2:
        raise ValueError("need at least two depth levels")
    if not 0 < z_min_m < z_max_m:
        raise ValueError(f"invalid depth range [{z_min_m}, {z_max_m}]")
    disp = np.linspace(1.0 / z_min_m, 1.0 / z_max_m, count)
    depths = 1.0 / disp
    # pin the endpoints so they are exactly the requested values
    depths[0], depths[-1] = z_min_m, z_max_m
    return DepthSet(tuple(depths))


@dataclass(frozen=True)
class DispersionModel:
    """Three-term Cauchy model eta(lambda) = A + B/lambda^2 + C/lambda^4 (lambda in nm).

    The defaults reproduce NOA61 (1.5634 at 546.1 nm).
    """

    A: float = 1.5375
    B: float = 8290.45
    C: float = -2.114e8
    valid_range_nm: tuple[float, float] = DISPERSION_RANGE_NM

    def __post_init__(self):
        lo, hi = self.valid_range_nm
        grid = np.linspace(lo, hi, 301)
        if np.any(self._eval(grid) <= 1.0):
            raise ValueError("dispersion model must give eta > 1 over its working range")

    def _eval(self, lam):
        return self.A + self.B / lam**2 + self.C / lam**4

    @classmethod
    def from_csv(cls, path) -> "DispersionModel":
        """Least-squares Cauchy fit to ``wavelength_nm,value`` rows."""
        lam, eta = _read_two_columns(path)
        design = np.stack([np.ones_like(lam), lam**-2, lam**-4], axis=1)
        coef, *_ = np.linalg.lstsq(design, eta, rcond=None)
        return cls(*map(float, coef))


def refractive_index(model: DispersionModel, wavelength_nm) -> np.ndarray | float:
    lam = np.asarray(wavelength_nm, dtype=float)
    lo, hi = model.valid_range_nm
    if np.any(lam < lo) or np.any(lam > hi):
        raise ValueError(f"wavelength {wavelength_nm} nm outside dispersion range [{lo}, {hi}]")
    eta = model._eval(lam)
    return float(eta) if eta.ndim == 0 else eta


def _gaussian(lam, mu, sigma):
    return np.exp(-0.5 * ((lam - mu) / sigma) ** 2)


@dataclass(frozen=True)
class CameraResponse:
    """Per-channel spectral responsivity, ``matrix[c, i]`` for wavelength ``i``."""

    wavelengths_nm: tuple[float, ...]
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, len(self.wavelengths_nm)):
            raise ValueError(f"response must be 3 x {len(self.wavelengths_nm)}, got {m.shape}")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("response must be finite and nonnegative")
        if np.any(m.sum(axis=0) == 0):
            raise ValueError("every wavelength needs a nonzero response in some channel")
        if np.any(m.sum(axis=1) == 0):
            raise ValueError("every channel needs a nonzero response at some wavelength")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "wavelengths_nm", tuple(float(x) for x in self.wavelengths_nm))

    @classmethod
    def default(cls, wavelengths: WavelengthSet | Sequence[float] | None = None) -> "CameraResponse":
        """Gaussian RGB curves (B 460, G 540, R 610 nm); each row sums to one so
        a unit-radiance white scene maps to J = (1, 1, 1)."""
        lam = np.asarray(list(wavelengths) if wavelengths is not None else WavelengthSet.default().values, float)
        m = np.stack([_gaussian(lam, 610.0, 40.0), _gaussian(lam, 540.0, 40.0), _gaussian(lam, 460.0, 35.0)])
        m = m / m.sum(axis=1, keepdims=True)
        return cls(tuple(lam), m)

    @classmethod
    def from_csv(cls, path, wavelengths: WavelengthSet | None = None) -> "CameraResponse":
        """Read ``wavelength_nm,r,g,b`` rows; optionally interpolate onto ``wavelengths``."""
        with open(path, newline="") as f:
            rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
        if not _is_number(rows[0][0]):
            rows = rows[1:]
        data = np.array([[float(x) for x in r[:4]] for r in rows])
        resp = cls(tuple(data[:, 0]), data[:, 1:4].T)
        return resp if wavelengths is None else resp.on(wavelengths)

    def on(self, wavelengths) -> "CameraResponse":
        lam = np.asarray(list(wavelengths), float)
        if np.array_equal(lam, np.asarray(self.wavelengths_nm)):
            return self
        src = np.asarray(self.wavelengths_nm)
        m = np.stack([np.interp(lam, src, row, left=0.0, right=0.0) for row in self.matrix])
        return CameraResponse(tuple(lam), m)

    def at(self, wavelength_nm: float) -> np.ndarray:
        """Linear interpolation of the three responses at a single wavelength."""
        src = np.asarray(self.wavelengths_nm)
        return np.array([np.interp(wavelength_nm, src, row) for row in self.matrix])


@dataclass(frozen=True)
class CameraConfig:
    focal_length_m: float
    sensor_pixel_pitch_m: float
    doe_sample_pitch_m: float
    doe_grid_size: int
    aperture_diameter_m: float
    psf_crop_px: int
    response: CameraResponse | None = None
    dispersion: DispersionModel = field(default_factory=DispersionModel)
    feature_upsample: int = 8
    design_wavelength_nm: float = DESIGN_WAVELENGTH_NM
    pad_factor: int = 2
    # False selects the variant with (x^2 + y^2)/z for the scene term
    scene_phase_half: bool = True

    def __post_init__(self):
        for name in ("focal_length_m", "sensor_pixel_pitch_m", "doe_sample_pitch_m", "aperture_diameter_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.doe_grid_size <= 0 or self.feature_upsample <= 0 or self.pad_factor < 1:
            raise ValueError("grid size, feature upsample and pad factor must be positive")
        if self.doe_grid_size % self.feature_upsample:
            raise ValueError("doe_grid_size must be a multiple of feature_upsample")
        if self.psf_crop_px <= 0 or self.psf_crop_px % 2 == 0:
            raise ValueError("psf_crop_px must be a positive odd integer")
        if self.aperture_diameter_m > self.doe_grid_size * self.doe_sample_pitch_m * (1 + 1e-12):
            raise ValueError("aperture larger than the DOE grid")

    @property
    def feature_grid_size(self) -> int:
        return self.doe_grid_size // self.feature_upsample

    @property
    def feature_pitch_m(self) -> float:
        return self.doe_sample_pitch_m * self.feature_upsample

    @property
    def padded_size(self) -> int:
        return self.doe_grid_size * self.pad_factor

    def fft_pitch_m(self, wavelength_nm: float) -> float:
        """Sample pitch of the Fourier-plane grid, lambda f / (N_pad dx)."""
        return wavelength_nm * 1e-9 * self.focal_length_m / (self.padded_size * self.doe_sample_pitch_m)

    def with_(self, **kw) -> "CameraConfig":
        return replace(self, **kw)

    @classmethod
    def prototype(cls) -> "CameraConfig":
        """Prototype geometry: 50 mm focal length, 6.22 um pixels, 3 mm aperture,
        375x375 features at 8 um simulated on a 3000x3000 1 um grid."""
        return cls(
            focal_length_m=50e-3,
            sensor_pixel_pitch_m=6.22e-6,
            doe_sample_pitch_m=1e-6,
            doe_grid_size=3000,
            aperture_diameter_m=3e-3,
            psf_crop_px=65,
            feature_upsample=8,
        )

    @classmethod
    def desk(cls, features: int = 64, crop: int = 33) -> "CameraConfig":
        """Training-scale geometry: ``features`` DOE features at 16 um (simulated
        at 8 um), 50 mm focal length, 12 um pixels.

        At 64 features the aperture is 1.024 mm and the outermost zone of an
        in-focus Fresnel lens spans about three features.
        """
        return cls._scaled(features, crop, feature_pitch=16e-6, upsample=2, pixel=12e-6)

    @classmethod
    def bench(cls, features: int = 192, crop: int = 33) -> "CameraConfig":
        """PSF-physics geometry: ``features`` DOE features at 8 um (simulated at
        4 um), 50 mm focal length, 8 um pixels; 1.536 mm aperture by default.

        The depth of field is narrower than the spacing of the seven default
        depth levels, which the 64-feature training geometry cannot offer.
        """
        return cls._scaled(features, crop, feature_pitch=8e-6, upsample=2, pixel=8e-6)

    @classmethod
    def _scaled(cls, features, crop, feature_pitch, upsample, pixel) -> "CameraConfig":
        n = features * upsample
        return cls(
            focal_length_m=50e-3,
            sensor_pixel_pitch_m=pixel,
            doe_sample_pitch_m=feature_pitch / upsample,
            doe_grid_size=n,
            aperture_diameter_m=features * feature_pitch,
            psf_crop_px=crop,
            feature_upsample=upsample,
        )


@dataclass(frozen=True)
class PhaseMap:
    """Unwrapped DOE phase (rad) at the design wavelength, on the feature grid."""

    phi: np.ndarray
    design_wavelength_nm: float = DESIGN_WAVELENGTH_NM
    label: str = ""

    def __post_init__(self):
        p = np.array(self.phi, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("phase map must be 2-D")
        if not np.all(np.isfinite(p)):
            raise ValueError("phase map must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "phi", p)

    @property
    def shape(self):
        return self.phi.shape


@dataclass(frozen=True)
class HeightMap:
    """DOE surface height (m). ``pitch_m`` is the grid spacing of ``h``."""

    h: np.ndarray
    pitch_m: float
    design_wavelength_nm: float = DESIGN_WAVELENGTH_NM

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64)
        if h.ndim != 2:
            raise ValueError("height map must be 2-D")
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ValueError("heights must be finite and nonnegative")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def shape(self):
        return self.h.shape


def max_height(model: DispersionModel, design_wavelength_nm: float = DESIGN_WAVELENGTH_NM) -> float:
    """Height of one full 2 pi wrap at the design wavelength (m)."""
    return design_wavelength_nm * 1e-9 / (refractive_index(model, design_wavelength_nm) - 1.0)


def phase_to_height(phase: PhaseMap, model: DispersionModel, pitch_m: float = 1.0) -> HeightMap:
    wrapped = np.mod(phase.phi, TWO_PI)
    # np.mod can return exactly 2 pi for tiny negative inputs
    wrapped[wrapped >= TWO_PI] = 0.0
    lam = phase.design_wavelength_nm
    h = lam * 1e-9 / TWO_PI * wrapped / (refractive_index(model, lam) - 1.0)
    return HeightMap(h, pitch_m, lam)


def height_to_phase(h: HeightMap, wavelength_nm: float, model: DispersionModel) -> np.ndarray:
    """DOE phase delay k (eta_lambda - 1) h in radians."""
    k = TWO_PI / (wavelength_nm * 1e-9)
    return k * (refractive_index(model, wavelength_nm) - 1.0) * h.h


def quantize_height(h: HeightMap, num_levels: int = 62, step_m: float = 21.5e-9) -> HeightMap:
    if num_levels < 2 or step_m <= 0:
        raise ValueError("need num_levels >= 2 and a positive step")
    q = np.clip(np.round(h.h / step_m), 0, num_levels - 1) * step_m
    return HeightMap(q, h.pitch_m, h.design_wavelength_nm)


def upsample_nearest(a: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(a, factor, axis=0), factor, axis=1)


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _read_two_columns(path) -> tuple[np.ndarray, np.ndarray]:
    with open(Path(path), newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    data = np.array([[float(r[0]), float(r[1])] for r in rows])
    return data[:, 0], data[:, 1]
