"""Geometric operations on instance masks.

Crop/flip/resize transforms that stay in lockstep with image augmentation,
binarization, tight bounding boxes, block-grid assignment for position
prompts, and IoU. Conventions are fixed so downstream tests are exact:
binarization compares with >=, block boundaries belong to the higher-index
cell (with right/bottom edge centers clamped to the last cell), and boxes are
half-open [x0, x1) x [y0, y1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ShapeError
from .interp import bilinear_resize

# Transformed masks whose total mass falls below this fraction of the view
# area count as "absent in view" and are dropped from positive pairs.
ABSENCE_EPS = 1e-3

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ViewTransform:
    """Crop rectangle in source pixels, optional horizontal flip, output size."""

    crop_x0: int
    crop_y0: int
    crop_w: int
    crop_h: int
    hflip: bool
    out_h: int
    out_w: int

    def validate(self, src_h: int, src_w: int) -> None:
        if self.crop_w < 1 or self.crop_h < 1:
            raise GeometryError(f"crop must be >= 1x1, got {self.crop_w}x{self.crop_h}")
        if self.out_h < 1 or self.out_w < 1:
            raise GeometryError(f"output must be >= 1x1, got {self.out_h}x{self.out_w}")
        if (
            self.crop_x0 < 0
            or self.crop_y0 < 0
            or self.crop_x0 + self.crop_w > src_w
            or self.crop_y0 + self.crop_h > src_h
        ):
            raise GeometryError(
                f"crop {self} falls outside a {src_h}x{src_w} source"
            )


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise GeometryError(f"degenerate box {self}")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)


@dataclass(frozen=True)
class BlockGrid:
    """Partition of an image into rows x cols cells, row-major indexing."""

    rows: int = 3
    cols: int = 3
    image_h: int = 0
    image_w: int = 0

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise GeometryError(f"grid must be >= 1x1, got {self.rows}x{self.cols}")
        if self.image_h < 1 or self.image_w < 1:
            raise GeometryError(
                f"image dims must be >= 1, got {self.image_h}x{self.image_w}"
            )


def transform_mask(mask: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Crop, optionally hflip, and bilinearly resize a mask; output in [0, 1]."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2D, got shape {mask.shape}")
    t.validate(mask.shape[0], mask.shape[1])
    crop = mask[t.crop_y0 : t.crop_y0 + t.crop_h, t.crop_x0 : t.crop_x0 + t.crop_w]
    if t.hflip:
        crop = crop[:, ::-1]
    out = bilinear_resize(crop, t.out_h, t.out_w)
    return np.clip(out, 0.0, 1.0)


def binarize(mask: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Threshold a normalized mask; pixel is 1 iff value >= threshold.

    An all-zero result is legal and signals "object absent".
    """
    mask = np.asarray(mask, dtype=np.float64)
    return (mask >= threshold).astype(np.uint8)


def bbox(binary: np.ndarray) -> BoundingBox | None:
    """Tightest half-open box containing all 1-pixels; None when empty."""
    binary = np.asarray(binary)
    if binary.ndim != 2:
        raise ShapeError(f"binary grid must be 2D, got shape {binary.shape}")
    ys, xs = np.nonzero(binary)
    if ys.size == 0:
        return None
    return BoundingBox(
        x0=int(xs.min()), y0=int(ys.min()), x1=int(xs.max()) + 1, y1=int(ys.max()) + 1
    )


def block_index(box: BoundingBox, grid: BlockGrid) -> int:
    """Row-major index of the grid cell containing the box center.

    Boundary centers fall into the higher-index cell; centers landing exactly
    on the right/bottom image edge clamp to the last column/row.
    """
    if box.x0 < 0 or box.y0 < 0 or box.x1 > grid.image_w or box.y1 > grid.image_h:
        raise GeometryError(f"box {box} outside {grid.image_h}x{grid.image_w} image")
    cx, cy = box.center
    row = int(np.floor(cy / (grid.image_h / grid.rows)))
    col = int(np.floor(cx / (grid.image_w / grid.cols)))
    row = min(row, grid.rows - 1)
    col = min(col, grid.cols - 1)
    return row * grid.cols + col


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary grids; 1.0 when both are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(a, b).sum()
    return float(inter) / float(union)


def mask_present(mask: np.ndarray, eps: float = ABSENCE_EPS) -> bool:
    """Absence filter: a mask is present when its mass clears eps * area."""
    mask = np.asarray(mask, dtype=np.float64)
    return float(mask.sum()) >= eps * mask.size
