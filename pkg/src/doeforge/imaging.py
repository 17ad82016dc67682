"""Sensor-image synthesis from a layered HS-D scene and a PSF stack."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import correlate1d
from scipy.special import ndtr

from .optics import CameraResponse, DepthSet, WavelengthSet
from .psf import PsfStack

FFT_KERNEL_THRESHOLD = 15


@dataclass(frozen=True)
class HsdScene:
    """Hyperspectral cube ``[|L|, H, W]`` plus depth (m) and validity mask.

    ``domain`` is ``"radiance"`` or ``"reflectance"``.
    """

    radiance: np.ndarray
    depth: np.ndarray
    valid_mask: np.ndarray
    wavelengths: WavelengthSet = field(default_factory=WavelengthSet.default)
    domain: str = "radiance"

    def __post_init__(self):
        r = np.asarray(self.radiance, dtype=np.float32)
        d = np.asarray(self.depth, dtype=np.float32)
        m = np.asarray(self.valid_mask, dtype=np.float32)
        if r.ndim != 3 or r.shape[0] != len(self.wavelengths):
            raise ValueError(f"cube shape {r.shape} does not match {len(self.wavelengths)} wavelengths")
        if d.shape != r.shape[1:] or m.shape != r.shape[1:]:
            raise ValueError("depth and mask must match the cube's spatial size")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ValueError("radiance must be finite and nonnegative")
        if np.any((m != 0) & (m != 1)):
            raise ValueError("valid_mask must be binary")
        if np.any(d[m > 0] <= 0):
            raise ValueError("depth must be positive on valid pixels")
        for name, arr in (("radiance", r), ("depth", d), ("valid_mask", m)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.radiance.shape[1:]


@dataclass(frozen=True)
class MaskStack:
    weights: np.ndarray  # [|Z|, H, W]

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ValueError("layer weights must be nonnegative")
        if not np.allclose(self.weights.sum(axis=0), 1.0, atol=1e-6):
            raise ValueError("layer weights must sum to one at every pixel")


@dataclass(frozen=True)
class SensorImage:
    J: np.ndarray  # [3, H, W]
    noise_sigma: float = 0.0
    rng_seed: int | None = None


def nearest_layer(depth: np.ndarray, depths: DepthSet) -> np.ndarray:
    """Index of the depth level nearest in disparity (out-of-range depths clamp to the ends)."""
    if len(depths) == 0:
        raise ValueError("empty DepthSet")
    disp = 1.0 / np.maximum(np.asarray(depth, float), 1e-12)
    levels = depths.disparities
    return np.abs(disp[..., None] - levels).argmin(axis=-1)


def integrated_gaussian_kernel(sigma: float) -> np.ndarray:
    """Gaussian averaged over each unit pixel, so a blurred step samples the normal CDF."""
    radius = int(np.ceil(6 * sigma))
    edges = np.arange(-radius, radius + 2) - 0.5
    k = np.diff(ndtr(edges / sigma))
    return k / k.sum()


def depth_masks(depth: np.ndarray, depths: DepthSet, blur_sigma_px: float = 1.0) -> MaskStack:
    idx = nearest_layer(depth, depths)
    onehot = (idx[None] == np.arange(len(depths))[:, None, None]).astype(np.float64)
    if blur_sigma_px > 0:
        k = integrated_gaussian_kernel(blur_sigma_px)
        onehot = correlate1d(onehot, k, axis=1, mode="reflect")
        onehot = correlate1d(onehot, k, axis=2, mode="reflect")
        onehot = np.clip(onehot, 0.0, None)
        onehot /= onehot.sum(axis=0, keepdims=True)
    return MaskStack(onehot)


def convolve_same(images: torch.Tensor, kernels: torch.Tensor, method: str = "auto") -> torch.Tensor:
    """Convolve ``[B, L, H, W]`` images with ``[L, Z, K, K]`` kernels -> ``[B, L, Z, H, W]``.

    True convolution (kernel flipped), same-size output, reflect padding.
    """
    b, nl, h, w = images.shape
    kl, nz, k, k2 = kernels.shape
    if kl != nl or k != k2 or k % 2 == 0:
        raise ValueError(f"kernels {tuple(kernels.shape)} do not match images {tuple(images.shape)}")
    r = k // 2
    padded = F.pad(images, (r, r, r, r), mode="reflect") if r else images
    if method == "auto":
        method = "fft" if k > FFT_KERNEL_THRESHOLD else "spatial"
    if method == "spatial":
        weight = torch.flip(kernels, dims=(-2, -1)).reshape(nl * nz, 1, k, k)
        out = F.conv2d(padded, weight, groups=nl)
        return out.reshape(b, nl, nz, h, w)
    if method != "fft":
        raise ValueError(f"unknown convolution method {method!r}")
    hp, wp = h + 2 * r, w + 2 * r
    kpad = F.pad(kernels, (0, wp - k, 0, hp - k))
    kpad = torch.roll(kpad, shifts=(-r, -r), dims=(-2, -1))
    spec = torch.fft.rfft2(padded)[:, :, None] * torch.fft.rfft2(kpad)[None]
    out = torch.fft.irfft2(spec, s=(hp, wp))
    return out[..., r : r + h, r : r + w]


def render(
    radiance: torch.Tensor,
    masks: torch.Tensor,
    psfs: torch.Tensor,
    omega: torch.Tensor,
    noise_sigma=0.0,
    generator: torch.Generator | None = None,
    method: str = "auto",
) -> torch.Tensor:
    """Batched, differentiable image formation.

    ``radiance [B, L, H, W]``, ``masks [B, Z, H, W]``, ``psfs [L, Z, K, K]``,
    ``omega [3, L]``; ``noise_sigma`` is a scalar or one value per batch item.
    """
    blurred = convolve_same(radiance, psfs, method)  # B L Z H W
    layered = (blurred * masks[:, None]).sum(dim=2)
    J = torch.einsum("cl,blhw->bchw", omega.to(layered.dtype), layered)
    sigma = torch.as_tensor(noise_sigma, dtype=J.dtype).reshape(-1, 1, 1, 1)
    if torch.any(sigma < 0):
        raise ValueError("noise_sigma must be nonnegative")
    if torch.any(sigma > 0):
        noise = torch.randn(J.shape, generator=generator, dtype=J.dtype)
        J = J + sigma * noise
        J = torch.maximum(torch.minimum(J, 1 + 4 * sigma), -4 * sigma)
    return J


def render_sensor_image(
    stack: PsfStack,
    scene,
    omega: CameraResponse,
    noise_sigma: float = 0.0,
    seed: int = 0,
    blur_sigma_px: float = 1.0,
) -> SensorImage:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    if stack.wavelengths != scene.wavelengths:
        raise ValueError("PSF stack and scene use different wavelength sets")
    omega = omega.on(stack.wavelengths)
    masks = depth_masks(scene.depth, stack.depths, blur_sigma_px).weights
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        J = render(
            torch.from_numpy(np.asarray(scene.radiance, np.float64))[None],
            torch.from_numpy(masks)[None],
            torch.from_numpy(np.asarray(stack.psfs, np.float64)),
            torch.from_numpy(np.array(omega.matrix)),
            noise_sigma,
            g,
        )
    return SensorImage(J[0].numpy(), noise_sigma, seed)


def masks_tensor(depths_batch: Sequence[np.ndarray], depth_set: DepthSet, blur_sigma_px: float = 1.0, dtype=torch.float32) -> torch.Tensor:
    return torch.stack([torch.from_numpy(depth_masks(d, depth_set, blur_sigma_px).weights) for d in depths_batch]).to(dtype)
