"""Label-map and overlay outputs written as Netpbm files."""
from __future__ import annotations

import numpy as np

from ..tensor import Tensor
from . import netpbm

BOUNDARY_RGB = (0, 0, 0)
LEAK_RGB = (255, 0, 0)


def to_uint8_rgb(image):
    """(3, H, W) or (H, W, 3) float in [0, 1], or uint8, -> (H, W, 3) uint8."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"expected a colour image, got shape {arr.shape}")
    if arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = arr.transpose(1, 2, 0)
    if arr.dtype == np.uint8:
        return arr.copy()
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _paint(image, mask, rgb):
    out = to_uint8_rgb(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != out.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {out.shape[:2]}")
    out[mask] = rgb
    return out


def overlay_boundaries(image, boundary):
    """Input image with boundary pixels set to black."""
    return _paint(image, boundary, BOUNDARY_RGB)


def overlay_leakage(image, leak):
    """Input image with leaked pixels set to pure red."""
    return _paint(image, leak, LEAK_RGB)


def palette(n, seed=0):
    """Distinct colours; entry 0 is dark grey for background."""
    rng = np.random.default_rng(seed)
    base = np.array([[40, 40, 40], [220, 80, 60], [80, 190, 90], [70, 100, 230],
                     [230, 200, 60], [170, 90, 200], [60, 200, 200], [240, 150, 40]], dtype=np.uint8)
    if n <= len(base):
        return base[:n]
    extra = rng.integers(30, 256, size=(n - len(base), 3)).astype(np.uint8)
    return np.concatenate([base, extra])


def colorize(labels, num_labels=None):
    """(H, W) integer map -> (H, W, 3) uint8; negative ids render white."""
    labels = np.asarray(labels)
    n = int(num_labels if num_labels is not None else max(int(labels.max(initial=0)) + 1, 1))
    pal = palette(max(n, 1))
    out = np.full(labels.shape + (3,), 255, dtype=np.uint8)
    ok = (labels >= 0) & (labels < len(pal))
    out[ok] = pal[labels[ok]]
    return out


def save_outputs(data, path):
    """Write a label map (2-D integers) as P5 or an overlay image (H, W, 3) as P6."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        if arr.dtype.kind not in "iub":
            raise ValueError(f"label maps must be integer, got {arr.dtype}")
        netpbm.save_labels(path, arr.astype(np.int64))
    elif arr.ndim == 3 and arr.shape[-1] == 3:
        netpbm.save_rgb(path, arr)
    else:
        raise ValueError(f"cannot save array of shape {arr.shape}: expected (H, W) or (H, W, 3)")
