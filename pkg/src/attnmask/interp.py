"""Resampling primitives used by map aggregation and mask transforms.

The bilinear kernel here is the one fixed convention for the whole library:
half-pixel sample centers (what most image libraries call align_corners=False),
border-replicating taps, float64 accumulation. Aggregated maps depend on this
kernel bit-for-bit, so every resize in the package routes through this module.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _axis_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tap indices and fractional weights for one axis, half-pixel centers."""
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    hi = np.clip(lo + 1, 0, n_in - 1)
    lo = np.clip(lo, 0, n_in - 1)
    return lo, hi, frac


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2D grid to (out_h, out_w) with the library bilinear kernel.

    Resizing to the source size is an exact identity (returns a copy), which
    aggregation relies on.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2D grid, got shape {grid.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dims must be >= 1, got {out_h}x{out_w}")
    if grid.shape == (out_h, out_w):
        return grid.copy()
    ylo, yhi, ty = _axis_taps(grid.shape[0], out_h)
    rows = grid[ylo, :] * (1.0 - ty)[:, None] + grid[yhi, :] * ty[:, None]
    xlo, xhi, tx = _axis_taps(grid.shape[1], out_w)
    return rows[:, xlo] * (1.0 - tx)[None, :] + rows[:, xhi] * tx[None, :]


def bilinear_resize_channels(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-channel bilinear resize for an H x W x C image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected an H x W x C image, got shape {image.shape}")
    planes = [bilinear_resize(image[:, :, c], out_h, out_w) for c in range(image.shape[2])]
    return np.stack(planes, axis=-1)


def block_mean(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact block-mean downsample; source dims must divide the target dims."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2D grid, got shape {grid.shape}")
    h, w = grid.shape
    if h % out_h or w % out_w:
        raise ShapeError(f"{h}x{w} does not divide evenly into {out_h}x{out_w} blocks")
    fh, fw = h // out_h, w // out_w
    return grid.reshape(out_h, fh, out_w, fw).mean(axis=(1, 3))
