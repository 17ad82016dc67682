"""Preview images: 16-bit PNG (gamma 2.2), 16-bit PGM and PFM."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np


def _to_u16(a: np.ndarray, gamma: float) -> np.ndarray:
    a = np.asarray(a, float)
    peak = a.max() if a.size else 0.0
    a = np.clip(a / peak, 0, 1) if peak > 0 else np.zeros_like(a)
    return np.round(a ** (1.0 / gamma) * 65535).astype(">u2")


def write_png16(path, image: np.ndarray, gamma: float = 2.2) -> None:
    """``image`` is [H, W] gray or [3, H, W] RGB; scaled to its own maximum."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = np.moveaxis(a, 0, -1)
        color = 2
    elif a.ndim == 2:
        color = 0
    else:
        raise ValueError("expected a [H, W] or [3, H, W] image")
    px = _to_u16(a, gamma)
    h, w = px.shape[:2]
    rows = px.reshape(h, -1)
    raw = b"".join(b"\x00" + r.tobytes() for r in rows)

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, 16, color, 0, 0, 0)
    Path(path).write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


def write_pgm16(path, image: np.ndarray, gamma: float = 1.0) -> None:
    px = _to_u16(image, gamma)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + px.tobytes())


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM, bottom row first."""
    a = np.asarray(image, "<f4")
    if a.ndim == 3:
        a = np.moveaxis(a, 0, -1)
        kind = b"PF"
    else:
        kind = b"Pf"
    h, w = a.shape[:2]
    Path(path).write_bytes(kind + f"\n{w} {h}\n-1.0\n".encode() + np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    kind, dims, scale, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    endian = "<" if float(scale) < 0 else ">"
    ch = 3 if kind == b"PF" else 1
    a = np.frombuffer(body, dtype=endian + "f4").reshape(h, w, ch)[::-1]
    return np.moveaxis(a, -1, 0).copy() if ch == 3 else a[..., 0].copy()


def psf_montage(psfs: np.ndarray, gap: int = 1) -> np.ndarray:
    """Tile a ``[L, Z, K, K]`` stack into one image (rows: wavelength, columns: depth)."""
    nl, nz, k, _ = psfs.shape
    out = np.zeros((nl * (k + gap) - gap, nz * (k + gap) - gap))
    for i in range(nl):
        for j in range(nz):
            tile = psfs[i, j]
            out[i * (k + gap) : i * (k + gap) + k, j * (k + gap) : j * (k + gap) + k] = tile / max(tile.max(), 1e-30)
    return out
