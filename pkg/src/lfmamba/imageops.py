"""Plain-numpy image operators: bicubic resize and YCbCr conversion.

The bicubic resampler follows the convention of the super-resolution
degradation pipelines: cubic kernel with a = -0.5, kernel support widened
by 1/scale when downscaling with antialias, weights normalized per output
pixel, edge-replicated boundaries.  These choices make a 2x/4x downscale
reproduce the LR inputs the benchmark models are trained on.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def cubic_kernel(x: np.ndarray) -> np.ndarray:
    """Keys cubic with a = -0.5."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    out = np.where(ax <= 1, 1.5 * ax3 - 2.5 * ax2 + 1.0, 0.0)
    out = np.where((ax > 1) & (ax <= 2), -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0, out)
    return out


def _resize_weights(in_size: int, out_size: int, scale: float, antialias: bool):
    """Per-output contributor indices (edge-clamped) and normalized weights."""
    shrink = scale < 1.0 and antialias
    kscale = scale if shrink else 1.0
    support = 4.0 / kscale
    # center of output pixel i in input coordinates
    u = (np.arange(out_size, dtype=np.float64) + 0.5) / scale - 0.5
    left = np.floor(u - support / 2).astype(np.int64)
    p = int(np.ceil(support)) + 2
    idx = left[:, None] + np.arange(p)[None, :]
    weights = cubic_kernel((u[:, None] - idx) * kscale) * kscale
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)  # edge replication
    return idx, weights


def bicubic_resize(img: np.ndarray, scale, antialias: bool = True) -> np.ndarray:
    """Resize the trailing two axes of ``img`` by ``scale``.

    ``scale`` may be a float or Fraction; output extents are
    round(extent * scale) and must be >= 1.
    """
    scale = float(Fraction(scale) if not isinstance(scale, (int, float)) else scale)
    if scale <= 0:
        raise ValueError("scale must be positive")
    h, w = img.shape[-2], img.shape[-1]
    oh, ow = int(round(h * scale)), int(round(w * scale))
    if oh < 1 or ow < 1:
        raise ValueError(f"output extent degenerate: {oh}x{ow}")
    if scale == 1.0:
        return img.copy()
    lead = img.shape[:-2]
    x = img.reshape(-1, h, w).astype(np.float64 if img.dtype == np.float64 else np.float32)

    idx_h, w_h = _resize_weights(h, oh, scale, antialias)
    idx_w, w_w = _resize_weights(w, ow, scale, antialias)
    w_h = w_h.astype(x.dtype)
    w_w = w_w.astype(x.dtype)
    # rows: out[i] = sum_k w_h[i,k] * x[idx_h[i,k]]
    x = np.einsum("ik,bikw->biw", w_h, x[:, idx_h, :], optimize=True)
    x = np.einsum("jk,bhjk->bhj", w_w, x[:, :, idx_w], optimize=True)
    return x.reshape(lead + (oh, ow))


# ITU-R BT.601 full-to-studio-range conversion (the "Y channel" of the
# SR benchmarks).  Inputs/outputs are channel-first (3, H, W) in [0, 1].
_RGB2YCBCR = np.array(
    [
        [65.481, 128.553, 24.966],
        [-37.797, -74.203, 112.0],
        [112.0, -93.786, -18.214],
    ]
) / 255.0
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0]) / 255.0
_YCBCR2RGB = np.linalg.inv(_RGB2YCBCR)


def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    if img.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got {img.shape[0]}")
    out = np.tensordot(_RGB2YCBCR, img, axes=([1], [0])) + _YCBCR_OFFSET[:, None, None]
    return out.astype(img.dtype)


def ycbcr_to_rgb(img: np.ndarray) -> np.ndarray:
    if img.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got {img.shape[0]}")
    out = np.tensordot(_YCBCR2RGB, img - _YCBCR_OFFSET[:, None, None], axes=([1], [0]))
    return out.astype(img.dtype)


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Luma plane only: (3, H, W) -> (1, H, W)."""
    if img.shape[0] == 1:
        return img.copy()
    return rgb_to_ycbcr(img)[:1]
