"""Synthetic HS-D scenes, illuminants and the HSDC container format."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .imaging import HsdScene
from .optics import WavelengthSet, _is_number

HSDC_MAGIC = b"HSDC"
HSDC_VERSION = 1


@dataclass(frozen=True)
class Illuminant:
    name: str
    spd: np.ndarray  # on the wavelength grid, max-normalized

    def __post_init__(self):
        s = np.asarray(self.spd, dtype=float)
        if np.any(s < 0) or s.max() <= 0:
            raise ValueError(f"illuminant {self.name}: SPD must be nonnegative and not all zero")
        object.__setattr__(self, "spd", s / s.max())


def _table(path_or_text) -> tuple[list[str], np.ndarray]:
    rows = [r for r in csv.reader(path_or_text) if r and not r[0].startswith("#")]
    header = rows[0] if not _is_number(rows[0][0]) else ["wavelength_nm"] + [f"col{i}" for i in range(1, len(rows[0]))]
    body = rows[1:] if header is rows[0] else rows
    return header, np.array([[float(x) for x in r] for r in body])


def load_illuminants(path=None, wavelengths: WavelengthSet | None = None) -> dict[str, Illuminant]:
    """Illuminants from a CSV with a ``wavelength_nm`` column and one column per SPD.

    Without ``path`` the shipped table (D65, A, D50, F2, F7, F11, LED-RGB1) is used.
    """
    wavelengths = wavelengths or WavelengthSet.default()
    if path is None:
        with resources.files("doeforge.data").joinpath("illuminants.csv").open() as f:
            header, data = _table(f)
    else:
        with open(path, newline="") as f:
            header, data = _table(f)
    lam = wavelengths.array
    return {name: Illuminant(name, np.interp(lam, data[:, 0], data[:, i])) for i, name in enumerate(header[1:], start=1)}


def apply_illuminant(reflectance: np.ndarray, illuminant: Illuminant, rescale: bool = True) -> np.ndarray:
    """Radiance = reflectance * SPD, rescaled to a unit maximum unless ``rescale`` is False."""
    r = np.asarray(reflectance, dtype=np.float64)
    if r.shape[0] != illuminant.spd.shape[0]:
        raise ValueError(f"reflectance has {r.shape[0]} channels, illuminant {illuminant.spd.shape[0]}")
    out = r * illuminant.spd[:, None, None]
    if rescale:
        peak = out.max()
        if peak > 0:
            out = out / peak
    return out.astype(np.float32)


def illuminate(scene: HsdScene, illuminant: Illuminant, rescale: bool = True) -> HsdScene:
    return HsdScene(apply_illuminant(scene.radiance, illuminant, rescale), scene.depth, scene.valid_mask, scene.wavelengths, "radiance")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 256
    width: int = 256
    layers: tuple[int, int] = (2, 5)
    materials_per_layer: tuple[int, int] = (2, 3)
    noise_cutoff_px: float = 6.0
    shapes_per_layer: tuple[int, int] = (2, 6)
    seed: int = 0

    def __post_init__(self):
        if self.layers[0] < 1 or self.layers[1] < self.layers[0]:
            raise ValueError("layer range must satisfy 1 <= min <= max")


def _smooth_spectrum(rng, lam):
    """Clipped random mixture of 2-4 Gaussian bumps over wavelength."""
    out = np.full(lam.shape, rng.uniform(0.0, 0.3))
    for _ in range(rng.integers(2, 5)):
        mu = rng.uniform(lam.min() - 40, lam.max() + 40)
        sigma = rng.uniform(25, 120)
        out += rng.uniform(0.1, 0.8) * np.exp(-0.5 * ((lam - mu) / sigma) ** 2)
    return np.clip(out, 0.0, 1.0)


def _band_noise(rng, h, w, cutoff):
    n = gaussian_filter(rng.standard_normal((h, w)), cutoff, mode="wrap")
    n -= n.min()
    return n / max(n.max(), 1e-12)


def _shape_mask(rng, h, w):
    yy, xx = np.mgrid[:h, :w]
    kind = rng.integers(3)
    if kind == 0:  # rectangle
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        return (yy >= y0) & (yy < y0 + rng.integers(h // 8, h // 2)) & (xx >= x0) & (xx < x0 + rng.integers(w // 8, w // 2))
    if kind == 1:  # disk
        cy, cx, r = rng.uniform(0, h), rng.uniform(0, w), rng.uniform(min(h, w) / 12, min(h, w) / 4)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    # stroke: a thick line segment
    p0 = rng.uniform(0, [h, w])
    p1 = rng.uniform(0, [h, w])
    d = p1 - p0
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(d @ d, 1e-9), 0, 1)
    dist2 = (yy - p0[0] - t * d[0]) ** 2 + (xx - p0[1] - t * d[1]) ** 2
    return dist2 <= rng.uniform(1.5, 5) ** 2


def generate_scene(spec: SceneSpec, wavelengths: WavelengthSet, z_range: tuple[float, float]) -> HsdScene:
    """Fronto-parallel textured layers; nearer layers occlude farther ones.

    Returns a reflectance-domain scene with an all-ones validity mask.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    lam = wavelengths.array
    z_min, z_max = z_range
    n_layers = int(rng.integers(spec.layers[0], spec.layers[1] + 1))
    disp = np.sort(rng.uniform(1 / z_max, 1 / z_min, n_layers))  # far -> near
    depths = np.clip(1.0 / disp, z_min, z_max)
    refl = np.zeros((len(lam), h, w))
    depth = np.zeros((h, w))
    for li in range(n_layers):
        n_mat = int(rng.integers(spec.materials_per_layer[0], spec.materials_per_layer[1] + 1))
        spectra = np.stack([_smooth_spectrum(rng, lam) for _ in range(n_mat)])
        texture = _band_noise(rng, h, w, spec.noise_cutoff_px)
        layer = spectra[0][:, None, None] * texture + spectra[1][:, None, None] * (1 - texture)
        for _ in range(rng.integers(spec.shapes_per_layer[0], spec.shapes_per_layer[1] + 1)):
            m = _shape_mask(rng, h, w)
            layer[:, m] = spectra[rng.integers(n_mat)][:, None] * rng.uniform(0.5, 1.0)
        if li == 0:
            cover = np.ones((h, w), bool)
        else:
            cover = np.zeros((h, w), bool)
            while cover.mean() < 0.05:
                cover |= _shape_mask(rng, h, w)
        refl[:, cover] = layer[:, cover]
        depth[cover] = depths[li]
    return HsdScene(np.clip(refl, 0, 1).astype(np.float32), depth.astype(np.float32), np.ones((h, w), np.float32), wavelengths, "reflectance")


def rescale_scene(scene: HsdScene, factor: float) -> HsdScene:
    """Spatially rescale a scene (bilinear cube, nearest depth and mask)."""
    if factor == 1.0:
        return scene
    cube = zoom(scene.radiance, (1, factor, factor), order=1, mode="nearest")
    depth = zoom(scene.depth, factor, order=0, mode="nearest")
    mask = zoom(scene.valid_mask, factor, order=0, mode="nearest")
    return HsdScene(np.clip(cube, 0, None), depth, mask, scene.wavelengths, scene.domain)


def colorchecker_scene(reflectance_csv, depth_m: float, patch_px: int = 16, wavelengths: WavelengthSet | None = None) -> HsdScene:
    """4 x 6 patch chart at constant depth from a CSV of 24 reflectance spectra.

    The CSV has a ``wavelength_nm`` column followed by 24 patch columns
    (row-major chart order); spectra are interpolated onto ``wavelengths``.
    """
    wavelengths = wavelengths or WavelengthSet.default()
    with open(reflectance_csv, newline="") as f:
        _, data = _table(f)
    if data.shape[1] - 1 != 24:
        raise ValueError(f"expected 24 patches, found {data.shape[1] - 1}")
    lam = wavelengths.array
    spectra = np.stack([np.interp(lam, data[:, 0], data[:, i]) for i in range(1, 25)])
    cube = np.zeros((len(lam), 4 * patch_px, 6 * patch_px), np.float32)
    for i in range(24):
        r, c = divmod(i, 6)
        cube[:, r * patch_px : (r + 1) * patch_px, c * patch_px : (c + 1) * patch_px] = spectra[i][:, None, None]
    shape = cube.shape[1:]
    return HsdScene(cube, np.full(shape, depth_m, np.float32), np.ones(shape, np.float32), wavelengths, "reflectance")


@dataclass
class HsdcFile:
    """Raw HSDC content: ``planes [C, H, W]`` plus optional depth and mask."""

    planes: np.ndarray
    header: dict = field(default_factory=dict)
    depth: np.ndarray | None = None
    mask: np.ndarray | None = None


def save_hsdc(obj, path, channel_semantics: str | None = None, extra: dict | None = None) -> None:
    """Write a scene, a ``[C, H, W]`` cube or a ``[L, Z, K, K]`` PSF stack.

    Layout: ``HSDC`` | u32 version | u64 header length | JSON header |
    f32 LE planes (lambda-major) | depth plane | mask plane.
    """
    header = {"dtype": "float32", "endianness": "little", "depth_units": "m"}
    depth = mask = None
    if isinstance(obj, HsdScene):
        planes = obj.radiance
        depth, mask = obj.depth, obj.valid_mask
        header.update(channel_semantics=channel_semantics or obj.domain, wavelengths_nm=list(obj.wavelengths))
    elif hasattr(obj, "psfs"):
        planes = np.asarray(obj.psfs).reshape(-1, *obj.psfs.shape[2:])
        header.update(
            channel_semantics=channel_semantics or "psf",
            wavelengths_nm=list(obj.wavelengths),
            depths_m=list(obj.depths),
            psf_grid=[len(obj.wavelengths), len(obj.depths)],
            pitch_m=obj.pitch_m,
        )
    else:
        planes = np.asarray(obj)
        header["channel_semantics"] = channel_semantics or "cube"
    if planes.ndim != 3:
        raise ValueError("HSDC planes must be [C, H, W]")
    header.update(dims=list(planes.shape), has_depth=depth is not None, has_mask=mask is not None)
    header.update(extra or {})
    head = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(HSDC_MAGIC + struct.pack("<IQ", HSDC_VERSION, len(head)) + head)
        f.write(np.ascontiguousarray(planes, dtype="<f4").tobytes())
        for extra_plane in (depth, mask):
            if extra_plane is not None:
                f.write(np.ascontiguousarray(extra_plane, dtype="<f4").tobytes())
    tmp.replace(path)


def read_hsdc(path) -> HsdcFile:
    raw = Path(path).read_bytes()
    if raw[:4] != HSDC_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated payload")
    version, n = struct.unpack_from("<IQ", raw, 4)
    if version != HSDC_VERSION:
        raise ValueError(f"{path}: unsupported HSDC version {version}")
    if 16 + n > len(raw):
        raise ValueError(f"{path}: truncated payload")
    header = json.loads(raw[16 : 16 + n])
    c, h, w = header["dims"]
    n_planes = c + int(header.get("has_depth", False)) + int(header.get("has_mask", False))
    expected = 16 + n + 4 * n_planes * h * w
    if len(raw) < expected:
        raise ValueError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise ValueError(f"{path}: header dims do not match payload size ({len(raw)} vs {expected} bytes)")
    data = np.frombuffer(raw, dtype="<f4", offset=16 + n).reshape(n_planes, h, w).astype(np.float32)
    out = HsdcFile(data[:c], header)
    i = c
    if header.get("has_depth"):
        out.depth, i = data[i], i + 1
    if header.get("has_mask"):
        out.mask = data[i]
    return out


def load_hsdc(path):
    """Load an HSDC file back into the object type it was written from."""
    from .psf import PsfStack
    from .optics import DepthSet

    f = read_hsdc(path)
    hd = f.header
    if f.depth is not None and f.mask is not None:
        return HsdScene(f.planes, f.depth, f.mask, WavelengthSet(tuple(hd["wavelengths_nm"])), hd["channel_semantics"])
    if "psf_grid" in hd:
        nl, nz = hd["psf_grid"]
        return PsfStack(
            f.planes.reshape(nl, nz, *f.planes.shape[1:]),
            WavelengthSet(tuple(hd["wavelengths_nm"])),
            DepthSet(tuple(hd["depths_m"])),
            hd.get("pitch_m", 0.0),
        )
    return f.planes
