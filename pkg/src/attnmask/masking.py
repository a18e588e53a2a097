"""Attention-guided balanced masking for masked modeling.

The overall mask ratio stays fixed (75% by default); what moves over training
is beta, the fraction of masked patches picked by attention rank instead of at
random. Beta ramps linearly from 0 to its ceiling (0.8 by default) so early
epochs mask randomly and late epochs concentrate on high-attention patches.
The attention map itself supplies the per-patch importance score, so no
teacher-student scorer network is involved.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class BetaSchedule:
    """Linear ramp of the attention-selected fraction, clamped at beta_max."""

    beta_max: float = 0.8
    total_epochs: int = 100

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta_max <= 1.0:
            raise ConfigError(f"beta_max must be in [0, 1], got {self.beta_max}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")


def beta_at(schedule: BetaSchedule, epoch: float) -> float:
    """Beta at an epoch index; fractional epochs are allowed."""
    if epoch < 0 or epoch > schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]"
        )
    beta = schedule.beta_max * epoch / schedule.total_epochs
    return min(max(beta, 0.0), schedule.beta_max)


@dataclass(frozen=True)
class MaskPlan:
    """Exact partition of masked patch indices into ranked and random subsets.

    attn_indices and random_indices are disjoint ascending tuples whose sizes
    add up to masked_total = round(ratio * num_patches), with
    len(attn_indices) = floor(beta * masked_total).
    """

    num_patches: int
    masked_total: int
    attn_indices: tuple[int, ...]
    random_indices: tuple[int, ...]
    ratio: float
    beta: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "P": self.num_patches,
                "ratio": self.ratio,
                "beta": self.beta,
                "attn_indices": list(self.attn_indices),
                "random_indices": list(self.random_indices),
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, payload: str) -> "MaskPlan":
        data = json.loads(payload)
        attn = tuple(int(i) for i in data["attn_indices"])
        rand = tuple(int(i) for i in data["random_indices"])
        return cls(
            num_patches=int(data["P"]),
            masked_total=len(attn) + len(rand),
            attn_indices=attn,
            random_indices=rand,
            ratio=float(data["ratio"]),
            beta=float(data["beta"]),
            seed=int(data["seed"]),
        )


def patch_scores(
    maps: np.ndarray | Sequence[np.ndarray], patch_rows: int, patch_cols: int
) -> np.ndarray:
    """Per-patch importance: mean map value inside each grid patch.

    Multiple instance maps are fused by elementwise max before scoring, so any
    foreground scores high regardless of which instance owns it. Grids that do
    not divide evenly are zero-padded on the bottom/right; patches that land
    entirely in padding therefore score exactly 0 and never outrank real
    foreground in the top-k branch.
    """
    if patch_rows < 1 or patch_cols < 1:
        raise ValueError(f"patch grid must be >= 1x1, got {patch_rows}x{patch_cols}")
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        fused = np.asarray(maps, dtype=np.float64)
    else:
        stack = [np.asarray(m, dtype=np.float64) for m in maps]
        if not stack:
            raise ValueError("need at least one map")
        if any(m.shape != stack[0].shape for m in stack):
            raise ShapeError("instance maps must share one shape")
        fused = np.maximum.reduce(stack)
    if fused.ndim != 2:
        raise ShapeError(f"maps must be 2D, got shape {fused.shape}")
    h, w = fused.shape
    ph = math.ceil(h / patch_rows)
    pw = math.ceil(w / patch_cols)
    padded = np.zeros((patch_rows * ph, patch_cols * pw), dtype=np.float64)
    padded[:h, :w] = fused
    blocks = padded.reshape(patch_rows, ph, patch_cols, pw).mean(axis=(1, 3))
    return blocks.reshape(-1)


def plan_mask(
    scores: np.ndarray, beta: float, seed: int, ratio: float = 0.75
) -> MaskPlan:
    """Partition patch indices into attention-ranked and random masked sets.

    masked_total = round-half-up(ratio * P). The attention subset is the top
    floor(beta * masked_total) scores with ties broken by lowest patch index;
    the rest of the masked set is a seeded uniform sample of the remaining
    patches.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    num_patches = scores.size
    if num_patches < 1:
        raise ValueError("scores must be nonempty")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must be in [0, 1], got {beta}")
    masked_total = int(math.floor(ratio * num_patches + 0.5))
    if masked_total == 0 or masked_total == num_patches:
        raise ConfigError(
            f"degenerate ratio: masking {masked_total} of {num_patches} patches"
        )
    attn_count = int(math.floor(beta * masked_total))
    # Primary key: score descending; tie key: patch index ascending.
    order = np.lexsort((np.arange(num_patches), -scores))
    attn = np.sort(order[:attn_count])
    remaining = order[attn_count:]
    rng = np.random.default_rng(seed)
    random_pick = rng.choice(remaining, size=masked_total - attn_count, replace=False)
    return MaskPlan(
        num_patches=num_patches,
        masked_total=masked_total,
        attn_indices=tuple(int(i) for i in attn),
        random_indices=tuple(int(i) for i in np.sort(random_pick)),
        ratio=ratio,
        beta=beta,
        seed=seed,
    )
