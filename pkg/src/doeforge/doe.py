"""DOE designs (Fresnel, spiral, Fisher-optimized), CRLB scoring and fabrication export."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .optics import (
    CameraConfig,
    CameraResponse,
    DepthSet,
    HeightMap,
    PhaseMap,
    WavelengthSet,
    max_height,
    phase_to_height,
    quantize_height,
    refractive_index,
    upsample_nearest,
)
from .psf import (
    doe_phase_from_height,
    doe_phase_from_phase_map,
    fourier_intensity,
    normalize_psf_tensor,
    pupil_field,
    resample_to_sensor,
)

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
PARAMS = ("p_x", "p_y", "p_z", "p_lambda")


def _feature_coords(camera: CameraConfig):
    n = camera.feature_grid_size
    x = (np.arange(n) - (n - 1) / 2) * camera.feature_pitch_m
    return np.meshgrid(x, x, indexing="xy")


def fresnel_phase(camera: CameraConfig, wavelength_nm: float = 550.0, z_focus_m: float | None = None) -> PhaseMap:
    """Lens phase that images depth ``z_focus_m`` (None = infinity) onto the sensor at ``wavelength_nm``."""
    if z_focus_m is not None and not z_focus_m > 0:
        raise ValueError("focus depth must be positive")
    xx, yy = _feature_coords(camera)
    k0 = TWO_PI / (wavelength_nm * 1e-9)
    scene = 0.0 if z_focus_m is None else 1.0 / (2.0 * z_focus_m)
    phi = -k0 * (xx**2 + yy**2) * (scene + 1.0 / (2.0 * camera.focal_length_m))
    return PhaseMap(phi, camera.design_wavelength_nm, "fresnel")


def spiral_phase(
    camera: CameraConfig,
    wavelength_nm: float = 550.0,
    z_focus_m: float | None = None,
    arms: int = 2,
    twist_rate: float = 12.0,
) -> PhaseMap:
    """Fresnel lens plus an azimuthal ramp growing with radius: twist*arms*atan2(y, x)*r/R.

    This is a parametric approximation of a rotating-PSF spiral design.
    """
    if arms < 1:
        raise ValueError("need at least one arm")
    base = fresnel_phase(camera, wavelength_nm, z_focus_m).phi
    xx, yy = _feature_coords(camera)
    r = np.hypot(xx, yy)
    radius = camera.aperture_diameter_m / 2
    phi = base + twist_rate * arms * np.arctan2(yy, xx) * r / radius
    return PhaseMap(phi, camera.design_wavelength_nm, "spiral (approximate)")


def default_fresnel(camera: CameraConfig, depths: DepthSet) -> PhaseMap:
    """Fresnel lens at 550 nm focused at the disparity midpoint of ``depths``."""
    return fresnel_phase(camera, 550.0, 2.0 / (1 / depths.z_min + 1 / depths.z_max))


@dataclass(frozen=True)
class PointSource:
    p_z: float
    p_lambda: float
    p_x: float = 0.0
    p_y: float = 0.0
    brightness: float = 1.0


@dataclass(frozen=True)
class FisherMatrix:
    """4x4 information over (p_x [m], p_y [m], p_z [m], p_lambda [nm])."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, float)
        if m.shape != (4, 4):
            raise ValueError("Fisher matrix must be 4x4")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class FisherSteps:
    xy_m: float | None = None  # default: half a sensor pixel
    z_rel: float = 0.01
    lambda_nm: float = 2.0


def _phase_source(design) -> Callable[[CameraConfig, float], torch.Tensor]:
    if isinstance(design, HeightMap):
        return lambda cam, lam: doe_phase_from_height(design, cam, lam)
    if isinstance(design, PhaseMap):
        t = torch.from_numpy(design.phi.copy())
        return lambda cam, lam: doe_phase_from_phase_map(t, cam, lam)
    if torch.is_tensor(design):
        return lambda cam, lam: doe_phase_from_phase_map(design, cam, lam)
    raise TypeError(f"unsupported DOE description {type(design)}")


def source_images(design, camera: CameraConfig, src: PointSource, response: CameraResponse, steps: FisherSteps = FisherSteps()):
    """RGB images of ``src`` and its central-difference neighbours.

    Returns ``(J, derivs)``: ``J [3, K, K]`` at the source and ``derivs [4, 3, K, K]``
    (d/dp_x, d/dp_y, d/dp_z, d/dp_lambda).
    """
    doe_at = _phase_source(design)
    dxy = steps.xy_m if steps.xy_m is not None else camera.sensor_pixel_pitch_m / 2
    dz = steps.z_rel * src.p_z
    dl = steps.lambda_nm
    lo, hi = camera.dispersion.valid_range_nm
    if src.p_lambda - dl < lo or src.p_lambda + dl > hi:
        raise ValueError(f"p_lambda {src.p_lambda} nm too close to the dispersion range edge for a central difference")
    if src.p_z - dz <= 0:
        raise ValueError("depth step too large")

    def image(lam, z, shifts):
        doe = doe_at(camera, lam)
        inten = fourier_intensity(pupil_field(doe, camera, lam, z), camera)
        pitch = camera.fft_pitch_m(lam)
        omega = torch.as_tensor(response.at(lam), dtype=inten.dtype)[:, None, None]
        outs = []
        for sx, sy in shifts:
            # a PSF displaced by +p is sampled at pixel positions - p
            psf = normalize_psf_tensor(resample_to_sensor(inten, pitch, camera, origin_m=(-(src.p_x + sx), -(src.p_y + sy))))
            outs.append(src.brightness * omega * psf)
        return outs

    center, xp, xm, yp, ym = image(src.p_lambda, src.p_z, [(0, 0), (dxy, 0), (-dxy, 0), (0, dxy), (0, -dxy)])
    (zp,) = image(src.p_lambda, src.p_z + dz, [(0, 0)])
    (zm,) = image(src.p_lambda, src.p_z - dz, [(0, 0)])
    (lp,) = image(src.p_lambda + dl, src.p_z, [(0, 0)])
    (lm,) = image(src.p_lambda - dl, src.p_z, [(0, 0)])
    derivs = torch.stack([(xp - xm) / (2 * dxy), (yp - ym) / (2 * dxy), (zp - zm) / (2 * dz), (lp - lm) / (2 * dl)])
    return center, derivs


def fisher_tensor(design, camera, src, sigma, response, steps=FisherSteps()) -> torch.Tensor:
    if not sigma > 0:
        raise ValueError("noise sigma must be positive")
    _, d = source_images(design, camera, src, response, steps)
    d = d.reshape(4, -1)
    m = d @ d.T / sigma**2
    return 0.5 * (m + m.T)


def fisher_matrix(design, camera: CameraConfig, src: PointSource, sigma: float, steps: FisherSteps = FisherSteps(), response: CameraResponse | None = None) -> FisherMatrix:
    """I_ij = sum_{c,k} dJ_c(k)/d delta_i * dJ_c(k)/d delta_j / sigma^2 for one point source."""
    response = response or camera.response or CameraResponse.default()
    with torch.no_grad():
        m = fisher_tensor(design, camera, src, sigma, response, steps)
    return FisherMatrix(m.numpy())


def a_optimality(fisher, eps_reg: float = 0.0):
    """trace((I + eps_reg * Id)^-1); accepts a FisherMatrix, ndarray or tensor."""
    if eps_reg < 0:
        raise ValueError("eps_reg must be nonnegative")
    m = fisher.matrix if isinstance(fisher, FisherMatrix) else fisher
    if torch.is_tensor(m):
        reg = m + eps_reg * torch.eye(4, dtype=m.dtype)
        return torch.trace(torch.linalg.inv(reg))
    reg = np.asarray(m, float) + eps_reg * np.eye(4)
    if eps_reg == 0 and np.linalg.matrix_rank(reg) < 4:
        raise np.linalg.LinAlgError("singular Fisher matrix; use eps_reg > 0")
    return float(np.trace(np.linalg.inv(reg)))


def default_eps(m, rel: float = 1e-6):
    """Tikhonov weight for A-optimality: ``rel`` times the smallest diagonal entry.

    The parameters carry mixed units (m and nm), so a trace-relative weight
    would swamp the weakly-informed spectral axis.
    """
    d = torch.diagonal(m) if torch.is_tensor(m) else np.diag(m)
    return rel * float(d.min())


def calibrate_brightness(camera: CameraConfig, wavelengths: WavelengthSet, depths: DepthSet, response: CameraResponse, peak: float = 0.8) -> float:
    """Brightness for which the default Fresnel lens's brightest RGB pixel over the grid is ``peak``."""
    fresnel = torch.from_numpy(default_fresnel(camera, depths).phi.copy())
    best = 0.0
    with torch.no_grad():
        for lam in wavelengths:
            doe = doe_phase_from_phase_map(fresnel, camera, lam)
            omega = response.at(lam).max()
            for z in depths:
                inten = fourier_intensity(pupil_field(doe, camera, lam, z), camera)
                psf = normalize_psf_tensor(resample_to_sensor(inten, camera.fft_pitch_m(lam), camera))
                best = max(best, float(psf.max()) * omega)
    return peak / best


def _sources(wavelengths, depths, brightness):
    return [PointSource(p_z=z, p_lambda=lam, brightness=brightness) for lam in wavelengths for z in depths]


def mean_a_optimality(design, camera, wavelengths, depths, sigma, response, brightness, eps_rel=1e-6, steps=FisherSteps()) -> torch.Tensor:
    vals = []
    for src in _sources(wavelengths, depths, brightness):
        m = fisher_tensor(design, camera, src, sigma, response, steps)
        vals.append(a_optimality(m, default_eps(m.detach(), eps_rel)))
    return torch.stack(vals).mean()


def crlb_score(design, camera: CameraConfig, wavelengths: WavelengthSet, depths: DepthSet, sigma: float = 0.005, response: CameraResponse | None = None, brightness: float | None = None, eps_rel: float = 1e-6) -> float:
    """Mean over on-axis sources of sqrt(A-optimality)."""
    # keep the full-resolution response so Omega(p_lambda +- step) is interpolated
    response = response or camera.response or CameraResponse.default()
    if brightness is None:
        brightness = calibrate_brightness(camera, wavelengths, depths, response)
    vals = []
    with torch.no_grad():
        for src in _sources(wavelengths, depths, brightness):
            m = fisher_tensor(design, camera, src, sigma, response)
            vals.append(math.sqrt(float(a_optimality(m, default_eps(m, eps_rel)))))
    return float(np.mean(vals))


@dataclass
class FisherOptions:
    iterations: int = 200
    lr: float = 0.05
    eps_rel: float = 1e-6
    brightness: float | None = None
    log_every: int = 10


@dataclass
class FisherResult:
    phase: PhaseMap
    trace: list[float] = field(default_factory=list)
    best_iteration: int = 0
    brightness: float = 1.0

    @property
    def initial(self) -> float:
        return self.trace[0]

    @property
    def best(self) -> float:
        return min(self.trace)


def optimize_fisher_doe(
    init: PhaseMap,
    camera: CameraConfig,
    wavelengths: WavelengthSet,
    depths: DepthSet,
    sigma: float = 0.005,
    opts: FisherOptions | None = None,
    response: CameraResponse | None = None,
) -> FisherResult:
    """Adam descent of the mean A-optimality over on-axis sources on the (p_z, p_lambda) grid.

    ``trace[i]`` is the objective at the phase before update ``i``; the phase
    with the smallest recorded objective is returned.
    """
    opts = opts or FisherOptions()
    # keep the full-resolution response so Omega(p_lambda +- step) is interpolated
    response = response or camera.response or CameraResponse.default()
    b = opts.brightness or calibrate_brightness(camera, wavelengths, depths, response)
    result = FisherResult(init, [], 0, b)
    if opts.iterations <= 0:
        return result
    phase = torch.tensor(init.phi, dtype=torch.float64, requires_grad=True)
    optim = torch.optim.Adam([phase], lr=opts.lr)
    best_phi = init.phi
    for it in range(opts.iterations + 1):
        optim.zero_grad()
        obj = mean_a_optimality(phase, camera, list(wavelengths), list(depths), sigma, response, b, opts.eps_rel)
        val = obj.item()
        if not math.isfinite(val):
            log.warning("objective diverged at iteration %d; keeping best finite iterate", it)
            break
        result.trace.append(val)
        if val <= min(result.trace):
            best_phi = phase.detach().numpy().copy()
            result.best_iteration = it
        if it % opts.log_every == 0:
            log.info("fisher iter %d: mean A-optimality %.6g", it, val)
        if it == opts.iterations:
            break
        obj.backward()
        optim.step()
    result.phase = PhaseMap(best_phi, init.design_wavelength_nm, "fisher")
    return result


def export_doe(h: HeightMap, path, num_levels: int = 62, step_m: float = 21.5e-9, upsample: int = 8, dispersion=None) -> Path:
    """Write a fabrication bundle: metadata.json, height.f32 (raw LE, meters) and preview.pgm (16-bit)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    hi = upsample_nearest(h.h, upsample)
    q = quantize_height(HeightMap(hi, h.pitch_m / upsample, h.design_wavelength_nm), num_levels, step_m)
    grid = q.h.astype("<f4")
    levels = np.round(q.h / step_m).astype(np.int64)
    meta = {
        "grid": list(grid.shape),
        "pitch_m": h.pitch_m / upsample,
        "feature_pitch_m": h.pitch_m,
        "upsample": upsample,
        "num_levels": num_levels,
        "level_step_m": step_m,
        "design_wavelength_nm": h.design_wavelength_nm,
        "dtype": "float32",
        "endianness": "little",
    }
    if dispersion is not None:
        meta["dispersion"] = {"model": "cauchy", "A": dispersion.A, "B_nm2": dispersion.B, "C_nm4": dispersion.C}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    (out / "height.f32").write_bytes(grid.tobytes())
    pgm = np.round(levels * (65535 / (num_levels - 1))).astype(">u2")
    with open(out / "preview.pgm", "wb") as f:
        f.write(f"P5\n{pgm.shape[1]} {pgm.shape[0]}\n65535\n".encode())
        f.write(pgm.tobytes())
    return out


def load_doe_bundle(path) -> np.ndarray:
    """Height grid (float32, meters) from a fabrication bundle."""
    p = Path(path)
    meta = json.loads((p / "metadata.json").read_text())
    raw = (p / "height.f32").read_bytes()
    rows, cols = meta["grid"]
    if len(raw) != 4 * rows * cols:
        raise ValueError(f"{p}: height payload does not match grid {rows}x{cols}")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()


def phase_to_export_height(phase: PhaseMap, camera: CameraConfig) -> HeightMap:
    return phase_to_height(phase, camera.dispersion, camera.feature_pitch_m)
