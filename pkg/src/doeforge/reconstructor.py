"""Encoder / dual-decoder reconstruction network, its loss and evaluation metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from skimage.metrics import structural_similarity
from torch import nn

from .optics import CameraResponse, DepthSet

PSNR_CAP_DB = 99.0
SSIM_PAD = 5  # half of the 11x11 window
DFNP_MAGIC = b"DFNP"
DFNP_VERSION = 1
DERIVED_BUFFERS = ("omega", "up_weights", "disparity_range")


def upsampling_weights(omega: np.ndarray) -> np.ndarray:
    """``w[l, c] = Omega[c, l] / (sum_c' Omega[c', l] * sum_l' Omega[c, l'])``."""
    omega = np.asarray(omega, float)
    per_wavelength = omega.sum(axis=0)
    if np.any(per_wavelength == 0):
        raise ValueError("a wavelength has zero response in every channel")
    per_channel = omega.sum(axis=1)
    return omega.T / (per_wavelength[:, None] * per_channel[None, :])


def spectral_upsample(J, omega) -> torch.Tensor | np.ndarray:
    """Distribute RGB intensity ``J [..., 3, H, W]`` over the spectral channels."""
    m = omega.matrix if isinstance(omega, CameraResponse) else omega
    w = upsampling_weights(m)
    if torch.is_tensor(J):
        return torch.einsum("lc,...chw->...lhw", torch.as_tensor(w, dtype=J.dtype), J)
    return np.einsum("lc,...chw->...lhw", w, J)


class Block(nn.Sequential):
    """Two (3x3 conv, batch norm, PReLU) pairs."""

    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.PReLU(cout),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.PReLU(cout),
        )


class Decoder(nn.Module):
    def __init__(self, widths, out_channels):
        super().__init__()
        levels = len(widths) - 1
        self.ups = nn.ModuleList(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(levels)))
        self.blocks = nn.ModuleList(Block(2 * widths[i], widths[i]) for i in reversed(range(levels)))
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, feats):
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class DualDecoderUNet(nn.Module):
    """U-Net encoder shared by a spectral decoder and a depth decoder.

    The spectral output is a residual on top of the response-weighted spectral
    upsampling of the input; the depth output is an inverse depth squashed
    onto ``[1/z_max, 1/z_min]``.
    """

    def __init__(self, omega: np.ndarray, disparity_range: tuple[float, float], levels: int = 3, width: int = 16):
        super().__init__()
        omega = np.array(omega, dtype=float)
        self.levels = levels
        self.width = width
        self.n_wavelengths = omega.shape[1]
        widths = [width * 2**i for i in range(levels + 1)]
        self.encoder = nn.ModuleList([Block(3, widths[0])] + [Block(widths[i - 1], widths[i]) for i in range(1, levels + 1)])
        self.pool = nn.MaxPool2d(2)
        self.spectral = Decoder(widths, self.n_wavelengths)
        self.depth = Decoder(widths, 1)
        # f64 so a double-precision net reproduces spectral_upsample exactly
        self.register_buffer("omega", torch.as_tensor(omega, dtype=torch.float64))
        self.register_buffer("up_weights", torch.as_tensor(upsampling_weights(omega), dtype=torch.float64))
        self.register_buffer("disparity_range", torch.tensor([min(disparity_range), max(disparity_range)], dtype=torch.float64))

    @property
    def topology(self) -> dict:
        lo, hi = self.disparity_range.tolist()
        return {
            "levels": self.levels,
            "width": self.width,
            "n_wavelengths": self.n_wavelengths,
            "disparity_range": [lo, hi],
            "omega": self.omega.tolist(),
        }

    def forward(self, J):
        h, w = J.shape[-2:]
        if h % 2**self.levels or w % 2**self.levels:
            raise ValueError(f"spatial size {h}x{w} not divisible by {2**self.levels}")
        feats = []
        x = J
        for i, block in enumerate(self.encoder):
            x = block(x if i == 0 else self.pool(x))
            feats.append(x)
        base = torch.einsum("lc,bchw->blhw", self.up_weights.to(J.dtype), J)
        spectral = self.spectral(feats) + base
        lo, hi = self.disparity_range.to(J.dtype)
        inv_depth = lo + (hi - lo) * torch.sigmoid(self.depth(feats)[:, 0])
        return spectral, inv_depth


def build_network(omega: CameraResponse | np.ndarray, depths: DepthSet, levels: int = 3, width: int = 16, seed: int | None = None) -> DualDecoderUNet:
    if seed is not None:
        torch.manual_seed(seed)
    m = omega.matrix if isinstance(omega, CameraResponse) else omega
    d = depths.disparities
    return DualDecoderUNet(m, (float(d.min()), float(d.max())), levels, width)


def zero_parameters(net: nn.Module) -> nn.Module:
    """Zero every conv/transposed-conv weight and bias; batch norm becomes the identity."""
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                mod.weight.zero_()
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.reset_parameters()
    return net


@dataclass
class Reconstruction:
    spectral: np.ndarray  # [L, H, W]
    inv_depth: np.ndarray  # [H, W], 1/m

    @property
    def depth(self) -> np.ndarray:
        return 1.0 / self.inv_depth


def reconstruct(J, net: DualDecoderUNet, train: bool = False) -> Reconstruction:
    """Run the network on a single ``[3, H, W]`` image (inference mode by default)."""
    was_training = net.training
    net.train(train)
    try:
        with torch.no_grad():
            dtype = next(net.parameters()).dtype
            x = torch.as_tensor(np.asarray(J), dtype=dtype)[None]
            spec, inv = net(x)
    finally:
        net.train(was_training)
    return Reconstruction(spec[0].numpy(), inv[0].numpy())


def _starts(n: int, patch: int, stride: int) -> list[int]:
    s = list(range(0, n - patch + 1, stride))
    if s[-1] != n - patch:
        s.append(n - patch)
    return s


def reconstruct_tiled(J, net: DualDecoderUNet, patch: int = 128, overlap: int = 32) -> Reconstruction:
    """Patch-wise inference on a large image; overlapping outputs are averaged."""
    J = np.asarray(J)
    _, h, w = J.shape
    if patch % 2**net.levels or h < patch or w < patch:
        raise ValueError("patch must be divisible by 2^levels and fit inside the image")
    if not 0 <= overlap < patch:
        raise ValueError("overlap must be in [0, patch)")
    spec = np.zeros((net.n_wavelengths, h, w))
    inv = np.zeros((h, w))
    count = np.zeros((h, w))
    for y in _starts(h, patch, patch - overlap):
        for x in _starts(w, patch, patch - overlap):
            r = reconstruct(J[:, y : y + patch, x : x + patch], net)
            spec[:, y : y + patch, x : x + patch] += r.spectral
            inv[y : y + patch, x : x + patch] += r.inv_depth
            count[y : y + patch, x : x + patch] += 1
    return Reconstruction(spec / count, inv / count)


def total_variation(d: torch.Tensor) -> torch.Tensor:
    """Sum of |forward differences| along both axes (zero at the last row/column)."""
    dx = (d[..., :, 1:] - d[..., :, :-1]).abs().sum()
    dy = (d[..., 1:, :] - d[..., :-1, :]).abs().sum()
    return dx + dy


def loss(spec_hat, inv_hat, spec, inv, alpha=1.0, beta=1e-2, gamma=1e-2) -> torch.Tensor:
    """alpha * MAE(spectral) + beta * MAE(inverse depth) + gamma * TV(predicted inverse depth) / M."""
    if spec_hat.shape != spec.shape or inv_hat.shape != inv.shape:
        raise ValueError("prediction and target shapes differ")
    m = inv_hat.numel()
    return alpha * (spec_hat - spec).abs().mean() + beta * (inv_hat - inv).abs().mean() + gamma * total_variation(inv_hat) / m


def psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    err = (np.asarray(pred, float) - np.asarray(target, float)) ** 2
    if mask is not None:
        err = err[..., np.asarray(mask) > 0]
    mse = float(err.mean())
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10 * np.log10(1.0 / mse))


def ssim(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean SSIM over channels; 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03.

    The map is averaged away from the 5-pixel border the window cannot cover,
    intersected with ``mask`` when given.
    """
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    h, w = pred.shape[-2:]
    sel = np.zeros((h, w), bool)
    sel[SSIM_PAD : h - SSIM_PAD, SSIM_PAD : w - SSIM_PAD] = True
    if mask is not None:
        m = np.asarray(mask) > 0
        sel = sel & m if np.any(sel & m) else m
    vals = []
    for p, t in zip(pred, target):
        _, smap = structural_similarity(
            p, t, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, K1=0.01, K2=0.03, full=True
        )
        vals.append(smap[sel].mean())
    return float(np.mean(vals))


def metrics(spec_hat, inv_hat, spec, depth, mask=None) -> dict:
    spec_hat, spec = np.asarray(spec_hat, float), np.asarray(spec, float)
    depth = np.asarray(depth, float)
    mask = np.ones(depth.shape) if mask is None else np.asarray(mask)
    if not np.any(mask > 0):
        raise ValueError("empty validity mask")
    z_hat = 1.0 / np.asarray(inv_hat, float)
    err = (z_hat - depth)[mask > 0]
    return {
        "psnr_db": psnr(spec_hat, spec, mask),
        "ssim": ssim(spec_hat, spec, mask),
        "depth_rmse_m": float(np.sqrt(np.mean(err**2))),
        "depth_mae_m": float(np.mean(np.abs(err))),
    }


def save_params(net: DualDecoderUNet, path) -> None:
    """DFNP container: magic, u32 version, u64 manifest length, JSON manifest, f32 LE blobs."""
    # response and disparity buffers are rebuilt from the topology at full precision
    state = {k: v for k, v in net.state_dict().items() if not k.endswith("num_batches_tracked") and k not in DERIVED_BUFFERS}
    manifest = {
        "topology": net.topology,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(DFNP_MAGIC + struct.pack("<IQ", DFNP_VERSION, len(head)) + head)
        for v in state.values():
            f.write(v.detach().cpu().numpy().astype("<f4").tobytes())


def load_params(path) -> DualDecoderUNet:
    raw = Path(path).read_bytes()
    if raw[:4] != DFNP_MAGIC:
        raise ValueError(f"{path}: not a DFNP file")
    version, n = struct.unpack_from("<IQ", raw, 4)
    if version != DFNP_VERSION:
        raise ValueError(f"{path}: unsupported DFNP version {version}")
    off = 16
    manifest = json.loads(raw[off : off + n])
    off += n
    topo = manifest["topology"]
    net = DualDecoderUNet(np.array(topo["omega"]), tuple(topo["disparity_range"]), topo["levels"], topo["width"])
    state = net.state_dict()
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if off + 4 * count > len(raw):
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(entry["shape"])
        off += 4 * count
        state[entry["name"]] = torch.from_numpy(arr.copy())
    if off != len(raw):
        raise ValueError(f"{path}: manifest/payload size mismatch")
    net.load_state_dict(state)
    return net
