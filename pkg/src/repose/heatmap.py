"""Ground-truth heatmap synthesis, peak decoding and resolution changes."""
from dataclasses import dataclass

import numpy as np

from .netcore.ops import resize_array


@dataclass(frozen=True)
class Keypoint2D:
    x: float
    y: float
    annotated: bool = True


def synth_heatmap(p, n, sigma, dtype=np.float32):
    """Unnormalized isotropic Gaussian centered at ``p`` over an ``n x n`` grid.

    Indexed ``grid[y, x]``.  An unannotated keypoint gives an all-zero grid.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if n < 1:
        raise ValueError(f"grid size must be >= 1, got {n}")
    if not p.annotated:
        return np.zeros((n, n), dtype=dtype)
    r = np.arange(n, dtype=np.float64)
    gx = np.exp(-((r - p.x) ** 2) / (2 * sigma**2))
    gy = np.exp(-((r - p.y) ** 2) / (2 * sigma**2))
    return np.outer(gy, gx).astype(dtype)


def synth_heatmaps(keypoints, mask, n, sigma, dtype=np.float32):
    """Stack of ``K`` heatmaps from a ``(K, 2)`` coordinate array and a boolean mask."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    r = np.arange(n, dtype=np.float64)
    gx = np.exp(-((r[None, :] - keypoints[:, :1]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((r[None, :] - keypoints[:, 1:2]) ** 2) / (2 * sigma**2))
    maps = gy[:, :, None] * gx[:, None, :]
    maps[~np.asarray(mask, dtype=bool)] = 0.0
    return maps.astype(dtype)


def decode_peak(h):
    """Argmax pixel of ``h`` and its value; ties go to the first row-major index.

    An all-zero (or non-positive) map decodes as undetected with confidence 0.
    """
    h = np.asarray(h)
    idx = int(np.argmax(h))
    conf = float(h.reshape(-1)[idx])
    if not conf > 0:
        return Keypoint2D(0.0, 0.0, annotated=False), 0.0
    y, x = divmod(idx, h.shape[1])
    return Keypoint2D(float(x), float(y), annotated=True), conf


def decode_batch(maps):
    """Vectorized argmax decode of ``(..., K, n, n)`` maps -> coords ``(..., K, 2)``, confidences."""
    maps = np.asarray(maps)
    n = maps.shape[-1]
    flat = maps.reshape(*maps.shape[:-2], -1)
    idx = flat.argmax(axis=-1)
    conf = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    coords = np.stack([idx % n, idx // n], axis=-1).astype(np.float64)
    return coords, conf


def scale_to_output(h, n_out):
    """Bilinear resize of a heatmap (or stack of heatmaps) to ``n_out x n_out``."""
    out = resize_array(np.asarray(h), n_out, n_out)
    return np.maximum(out, 0)


def sigma_for(size, base_sigma=5.0, base_size=128):
    """Gaussian width scaled linearly with output resolution (5 at 128, 10 at 256)."""
    return base_sigma * size / base_size


def to_uint8(h):
    """8-bit grayscale export: ``value * 255`` clamped to [0, 255]."""
    return np.clip(np.asarray(h, dtype=np.float64) * 255.0, 0, 255).round().astype(np.uint8)
