"""Scalar-diffraction PSF simulation of a DOE camera.

A point at depth z illuminates the aperture with a paraxial spherical wave; the
DOE adds its phase; a single Fresnel transform over the focal distance carries
the field to the sensor. The Fourier-plane intensity is resampled onto sensor
pixels, center-cropped and normalized to unit sum.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch

from .autodiff import wrap_phase
from .optics import (
    CameraConfig,
    DepthSet,
    HeightMap,
    PhaseMap,
    WavelengthSet,
    refractive_index,
)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ComplexField:
    real: np.ndarray
    imag: np.ndarray
    pitch_m: float

    def __post_init__(self):
        if np.shape(self.real) != np.shape(self.imag):
            raise ValueError("real and imaginary grids differ in shape")
        if not self.pitch_m > 0:
            raise ValueError("pitch must be positive")

    @property
    def intensity(self) -> np.ndarray:
        return self.real**2 + self.imag**2


@dataclass(frozen=True)
class Psf:
    intensity: np.ndarray
    wavelength_nm: float
    depth_m: float
    incident_angle_deg: float = 0.0
    pitch_m: float = 0.0

    def __post_init__(self):
        if np.any(self.intensity < 0):
            raise ValueError("PSF intensity must be nonnegative")


@dataclass(frozen=True)
class PsfStack:
    """``psfs[i, j]`` is the PSF at ``wavelengths[i]``, ``depths[j]``."""

    psfs: np.ndarray
    wavelengths: WavelengthSet
    depths: DepthSet
    pitch_m: float = 0.0

    def __post_init__(self):
        shape = np.shape(self.psfs)
        if len(shape) != 4 or shape[:2] != (len(self.wavelengths), len(self.depths)):
            raise ValueError(f"stack shape {shape} does not match |L| x |Z| grid")
        if shape[2] != shape[3]:
            raise ValueError("PSF crops must be square")

    def __len__(self):
        return self.psfs.shape[0] * self.psfs.shape[1]

    @property
    def crop_px(self) -> int:
        return self.psfs.shape[-1]


def circular_mask(n: int, pitch_m: float, diameter_m: float) -> np.ndarray:
    """1 where the sample center lies within ``diameter/2`` of the grid center."""
    x = (np.arange(n) - (n - 1) / 2) * pitch_m
    r2 = x[:, None] ** 2 + x[None, :] ** 2
    return (r2 <= (diameter_m / 2) ** 2 * (1 + 1e-12)).astype(np.float64)


def aperture_mask(camera: CameraConfig) -> np.ndarray:
    return circular_mask(camera.doe_grid_size, camera.doe_sample_pitch_m, camera.aperture_diameter_m)


def _geometry(camera: CameraConfig):
    return _grid(camera.doe_grid_size, camera.doe_sample_pitch_m, camera.aperture_diameter_m)


@lru_cache(maxsize=8)
def _grid(n: int, pitch_m: float, diameter_m: float):
    x = (np.arange(n) - (n - 1) / 2) * pitch_m
    r2 = x[:, None] ** 2 + x[None, :] ** 2
    return torch.from_numpy(x), torch.from_numpy(r2), torch.from_numpy(circular_mask(n, pitch_m, diameter_m))


def doe_phase_from_phase_map(phase: torch.Tensor, camera: CameraConfig, wavelength_nm: float, wrap: bool = True) -> torch.Tensor:
    """Per-wavelength DOE phase on the simulation grid from the design phase on the feature grid.

    The wrapped design phase becomes a height (one 2 pi wrap at the design
    wavelength) which delays ``wavelength_nm`` by k (eta - 1) h.
    """
    u = camera.doe_grid_size // phase.shape[-1]
    if u * phase.shape[-1] != camera.doe_grid_size:
        raise ValueError(f"phase grid {tuple(phase.shape)} does not tile the {camera.doe_grid_size}-sample DOE grid")
    if wrap:
        phase = wrap_phase(phase)
    if u > 1:
        phase = torch.repeat_interleave(torch.repeat_interleave(phase, u, dim=-2), u, dim=-1)
    lam_d = camera.design_wavelength_nm
    disp = camera.dispersion
    scale = (lam_d / wavelength_nm) * (refractive_index(disp, wavelength_nm) - 1) / (refractive_index(disp, lam_d) - 1)
    return phase * scale


def doe_phase_from_height(h: HeightMap, camera: CameraConfig, wavelength_nm: float) -> torch.Tensor:
    grid = h.h
    n = camera.doe_grid_size
    if grid.shape[0] != n:
        u = n // grid.shape[0]
        if u * grid.shape[0] != n or grid.shape[0] != grid.shape[1]:
            raise ValueError(f"height grid {grid.shape} does not match the {n}-sample DOE grid")
        grid = np.repeat(np.repeat(grid, u, axis=0), u, axis=1)
    k = TWO_PI / (wavelength_nm * 1e-9)
    eta = refractive_index(camera.dispersion, wavelength_nm)
    return torch.from_numpy(k * (eta - 1.0) * grid)


def pupil_field(doe_phase: torch.Tensor, camera: CameraConfig, wavelength_nm: float, depth_m: float, angle_deg: float = 0.0) -> torch.Tensor:
    """Aperture-plane field A exp[i k (phi_scene + phi_focal + x' sin(theta))] exp[i phi_DOE]."""
    if not depth_m > 0:
        raise ValueError("depth must be positive")
    refractive_index(camera.dispersion, wavelength_nm)  # range check
    x, r2, aperture = _geometry(camera)
    x, r2, aperture = x.to(doe_phase.dtype), r2.to(doe_phase.dtype), aperture.to(doe_phase.dtype)
    k = TWO_PI / (wavelength_nm * 1e-9)
    scene = 1.0 / (2.0 * depth_m) if camera.scene_phase_half else 1.0 / depth_m
    quad = k * r2 * (scene + 1.0 / (2.0 * camera.focal_length_m))
    if angle_deg:
        quad = quad + k * math.sin(math.radians(angle_deg)) * x[None, :]
    total = quad + doe_phase
    return aperture * torch.exp(1j * total)


def fourier_intensity(field: torch.Tensor, camera: CameraConfig) -> torch.Tensor:
    """|F{field}|^2 on the zero-padded grid, unitary scaling, zero frequency at index N_pad/2."""
    n = field.shape[-1]
    npad = camera.padded_size
    lo = (npad - n) // 2
    padded = torch.nn.functional.pad(field, (lo, npad - n - lo, lo, npad - n - lo))
    spec = torch.fft.fftshift(torch.fft.fft2(padded), dim=(-2, -1)) / npad
    return spec.real**2 + spec.imag**2


def bilinear_weights(positions_m: np.ndarray, pitch_in_m: float, n_in: int) -> np.ndarray:
    """Dense interpolation matrix (len(positions) x n_in) for a centered input grid.

    Input sample i sits at ``(i - n_in // 2) * pitch_in_m``.
    """
    t = np.asarray(positions_m, float) / pitch_in_m + n_in // 2
    i0 = np.floor(t).astype(int)
    frac = t - i0
    w = np.zeros((len(t), n_in))
    rows = np.arange(len(t))
    for idx, weight in ((i0, 1.0 - frac), (i0 + 1, frac)):
        ok = (idx >= 0) & (idx < n_in)
        np.add.at(w, (rows[ok], idx[ok]), weight[ok])
    return w


def _coverage(pitch_in_m: float, n_in: int, pitch_out_m: float, origin_m: float) -> np.ndarray:
    """Column sums of the interpolation matrix over every sensor pixel on the input support."""
    lo = -(n_in // 2) * pitch_in_m
    hi = (n_in - 1 - n_in // 2) * pitch_in_m
    j = np.arange(math.ceil((lo - origin_m) / pitch_out_m), math.floor((hi - origin_m) / pitch_out_m) + 1)
    t = (origin_m + j * pitch_out_m) / pitch_in_m + n_in // 2
    i0 = np.floor(t).astype(int)
    frac = t - i0
    s = np.zeros(n_in)
    for idx, weight in ((i0, 1.0 - frac), (i0 + 1, frac)):
        ok = (idx >= 0) & (idx < n_in)
        np.add.at(s, idx[ok], weight[ok])
    return s


def resample_to_sensor(
    intensity: torch.Tensor,
    input_pitch_m: float,
    camera: CameraConfig,
    size: int | None = None,
    origin_m: tuple[float, float] = (0.0, 0.0),
) -> torch.Tensor:
    """Bilinearly resample a centered intensity grid onto sensor pixels.

    Returns the ``size`` x ``size`` window of sensor pixels centered on
    ``origin_m`` (x, y). The result is scaled so that the resampled image over
    the full input support carries the input's total energy.
    """
    n = intensity.shape[-1]
    p = camera.sensor_pixel_pitch_m
    size = camera.psf_crop_px if size is None else size
    c = (size - 1) / 2
    ox, oy = origin_m
    pos_x = ox + (np.arange(size) - c) * p
    pos_y = oy + (np.arange(size) - c) * p
    lo = -(n // 2) * input_pitch_m
    hi = (n - 1 - n // 2) * input_pitch_m
    if min(pos_x.min(), pos_y.min()) < lo or max(pos_x.max(), pos_y.max()) > hi:
        raise ValueError(f"sensor window of {size} px exceeds the {n}-sample Fourier-plane support")
    wx = bilinear_weights(pos_x, input_pitch_m, n)
    wy = bilinear_weights(pos_y, input_pitch_m, n)
    # restrict the product to the rows/columns actually touched
    cx = np.flatnonzero(wx.any(axis=0))
    cy = np.flatnonzero(wy.any(axis=0))
    x0, x1, y0, y1 = cx[0], cx[-1] + 1, cy[0], cy[-1] + 1
    dt = intensity.dtype
    wx_t = torch.from_numpy(wx[:, x0:x1]).to(dt)
    wy_t = torch.from_numpy(wy[:, y0:y1]).to(dt)
    out = wy_t @ intensity[..., y0:y1, x0:x1] @ wx_t.T
    sx = torch.from_numpy(_coverage(input_pitch_m, n, p, ox)).to(dt)
    sy = torch.from_numpy(_coverage(input_pitch_m, n, p, oy)).to(dt)
    full_total = torch.einsum("...ij,i,j->...", intensity, sy, sx)
    total = intensity.sum(dim=(-2, -1))
    return out * (total / full_total)[..., None, None]


def normalize_psf_tensor(psf: torch.Tensor) -> torch.Tensor:
    total = psf.sum(dim=(-2, -1), keepdim=True)
    if torch.any(total <= 0):
        raise ValueError("cannot normalize an all-zero PSF")
    return psf / total


def normalize_psf(psf: Psf) -> Psf:
    total = float(np.sum(psf.intensity))
    if not total > 0:
        raise ValueError("cannot normalize an all-zero PSF")
    return Psf(psf.intensity / total, psf.wavelength_nm, psf.depth_m, psf.incident_angle_deg, psf.pitch_m)


def psf_from_doe_phase(
    doe_phase: torch.Tensor,
    camera: CameraConfig,
    wavelength_nm: float,
    depth_m: float,
    angle_deg: float = 0.0,
    origin_m: tuple[float, float] | None = None,
) -> torch.Tensor:
    """Normalized sensor PSF for a per-wavelength DOE phase on the simulation grid.

    By default the crop follows the chief ray, landing at f sin(theta) along x.
    """
    field = pupil_field(doe_phase, camera, wavelength_nm, depth_m, angle_deg)
    inten = fourier_intensity(field, camera)
    if origin_m is None:
        origin_m = (camera.focal_length_m * math.sin(math.radians(angle_deg)), 0.0)
    sensor = resample_to_sensor(inten, camera.fft_pitch_m(wavelength_nm), camera, origin_m=origin_m)
    return normalize_psf_tensor(sensor)


def psf_stack_from_phase(
    phase: torch.Tensor,
    camera: CameraConfig,
    wavelengths: Sequence[float],
    depths: Sequence[float],
    wrap: bool = True,
) -> torch.Tensor:
    """Differentiable ``[|L|, |Z|, crop, crop]`` stack from the unwrapped design phase."""
    rows = []
    for lam in wavelengths:
        doe = doe_phase_from_phase_map(phase, camera, lam, wrap=wrap)
        rows.append(torch.stack([psf_from_doe_phase(doe, camera, lam, z) for z in depths]))
    return torch.stack(rows)


def simulate_psf(h: HeightMap, camera: CameraConfig, wavelength_nm: float, depth_m: float, angle_deg: float = 0.0) -> Psf:
    if not depth_m > 0:
        raise ValueError("depth must be positive")
    doe = doe_phase_from_height(h, camera, wavelength_nm)
    with torch.no_grad():
        out = psf_from_doe_phase(doe, camera, wavelength_nm, depth_m, angle_deg)
    return Psf(out.numpy(), wavelength_nm, depth_m, angle_deg, camera.sensor_pixel_pitch_m)


def psf_stack(h: HeightMap, camera: CameraConfig, wavelengths: WavelengthSet, depths: DepthSet, jobs: int = 1) -> PsfStack:
    """All |L| x |Z| PSFs; each result lands in its own slot, so any ``jobs`` gives the same stack."""
    k = camera.psf_crop_px
    out = np.empty((len(wavelengths), len(depths), k, k))
    tasks = [(i, j, lam, z) for i, lam in enumerate(wavelengths) for j, z in enumerate(depths)]

    def run(task):
        i, j, lam, z = task
        out[i, j] = simulate_psf(h, camera, lam, z).intensity

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(run, tasks))
    else:
        for t in tasks:
            run(t)
    return PsfStack(out, wavelengths, depths, camera.sensor_pixel_pitch_m)


def phase_map_stack(phase: PhaseMap, camera: CameraConfig, wavelengths: WavelengthSet, depths: DepthSet) -> PsfStack:
    with torch.no_grad():
        st = psf_stack_from_phase(torch.from_numpy(np.array(phase.phi)), camera, list(wavelengths), list(depths))
    return PsfStack(st.numpy(), wavelengths, depths, camera.sensor_pixel_pitch_m)
