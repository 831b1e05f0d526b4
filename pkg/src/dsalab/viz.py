"""Attention heatmaps written as binary PPM (P6) images."""

from __future__ import annotations

import re

import numpy as np

from . import tensor as T
from . import vit
from .formats import write_bytes
from .tensor import Tensor
from .vit import ViTConfig

# viridis sampled at 9 evenly spaced stops; the 256-entry table is the
# linear interpolation between them, rounded once at import
_STOPS = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
    [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
], dtype=np.float64)
_pos = np.linspace(0.0, 1.0, len(_STOPS))
_t = np.linspace(0.0, 1.0, 256)
LUT = np.stack([np.interp(_t, _pos, _STOPS[:, c]) for c in range(3)], axis=1).round().astype(np.uint8)
del _pos, _t


def patch_attention(params: dict[str, Tensor], cfg: ViTConfig, images: np.ndarray) -> np.ndarray:
    """Attention each patch receives, averaged over layers, heads and query rows.

    Returns (B, gh, gw).
    """
    with T.no_grad():
        acts = vit.forward(params, cfg, np.asarray(images, dtype=np.float64))
    a = acts.attention                       # (B, L, H, N, N)
    received = a.mean(axis=(1, 2, 3))[:, 1:]  # drop the class-token column
    return received.reshape(len(images), *cfg.grid)


def colorize(grid: np.ndarray, scale: int) -> np.ndarray:
    """Min-max normalize one (gh, gw) map and upsample it to RGB uint8."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    u = np.zeros_like(g) if hi - lo <= 0 else (g - lo) / (hi - lo)
    idx = np.clip(np.floor(u * 255 + 0.5), 0, 255).astype(np.intp)
    rgb = LUT[idx]
    return np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)


def to_rgb8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) floats in [0, 1] to (H, W, 3) uint8."""
    return np.clip(np.floor(np.asarray(image).transpose(1, 2, 0) * 255 + 0.5), 0, 255).astype(np.uint8)


def panel(image: np.ndarray, maps: list[np.ndarray], patch_size: int, gap: int = 2) -> np.ndarray:
    """The input image followed by one heatmap per model, left to right."""
    tiles = [to_rgb8(image)] + [colorize(m, patch_size) for m in maps]
    h = tiles[0].shape[0]
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for i, t in enumerate(tiles):
        if i:
            parts.append(sep)
        parts.append(t)
    return np.concatenate(parts, axis=1)


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", buf)
    if m is None:
        raise ValueError("not an 8-bit P6 image")
    w, h = int(m.group(1)), int(m.group(2))
    body = buf[m.end():]
    if len(body) != w * h * 3:
        raise ValueError(f"P6 body has {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, rgb: np.ndarray) -> None:
    write_bytes(path, encode_ppm(rgb))
