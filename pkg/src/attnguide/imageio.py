"""Binary PPM output for images and attention heatmaps."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParameterError

HEATMAP_SCALE = 16


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly onto 0..255, rounding half up (0.0 -> 128)."""
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ParameterError("image contains non-finite values")
    if img.min() < -1.0 or img.max() > 1.0:
        raise ParameterError(f"image values must lie in [-1, 1], got [{img.min():.4g}, {img.max():.4g}]")
    return np.floor((img + 1.0) * 127.5 + 0.5).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ParameterError(f"expected an (H, W, 3) array, got shape {rgb.shape}")
    h, w = rgb.shape[:2]
    return f"P6 {w} {h} 255\n".encode("ascii") + rgb.tobytes()


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or len(parts) < 5:
        raise ParameterError(f"{path} is not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ParameterError(f"unsupported maxval {maxval}")
    body = data[len(data) - w * h * 3:]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_image(image: np.ndarray, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_ppm(to_bytes(image)))
    return path


def hot_colormap(v: np.ndarray) -> np.ndarray:
    """black -> red -> yellow -> white; monotone in luminance."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)
    return np.floor(rgb * 255 + 0.5).astype(np.uint8)


def heatmap_rgb(grid: np.ndarray, vmax: float | None = None, scale: int = HEATMAP_SCALE) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ParameterError(f"heatmap grid must be 2-D, got shape {g.shape}")
    if not np.all(np.isfinite(g)) or g.min() < 0:
        raise ParameterError("heatmap values must be finite and >= 0")
    top = float(g.max()) if vmax is None else float(vmax)
    norm = g / top if top > 0 else np.zeros_like(g)
    big = np.repeat(np.repeat(norm, scale, axis=0), scale, axis=1)
    return hot_colormap(big)


def write_heatmap(grid: np.ndarray, path, vmax: float | None = None) -> Path:
    """8x8 grid upsampled x16 (nearest neighbour), normalized by its max unless ``vmax`` is given."""
    path = Path(path)
    path.write_bytes(encode_ppm(heatmap_rgb(grid, vmax)))
    return path
