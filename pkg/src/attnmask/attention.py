"""Cross-attention maps: computation, per-noun selection, and aggregation.

A text-conditioned generator exposes, per layer and denoising timestep, a grid
of token-attention rows. This module turns those raw grids into one normalized
spatial mask per noun: slice out the noun's token maps, resize everything to a
common grid, average with equal weight, then min-max normalize.

All functions are pure and hold no state; they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ShapeError
from .interp import bilinear_resize

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class AttentionEntry:
    """One stored map: a layer/timestep pair's H x W x L token-attention grid."""

    layer_id: int
    timestep: int
    map: np.ndarray


@dataclass
class AttentionStack:
    """Raw per-layer/per-timestep cross-attention maps plus the prompt length.

    Invariants (checked by `validate`): every entry's last axis has length
    `prompt_length`, every spatial position's row is a probability vector
    (sums to 1 within 1e-6, nonnegative), and spatial dims are >= 1.
    """

    entries: list[AttentionEntry]
    prompt_length: int

    def validate(self) -> None:
        if self.prompt_length < 1:
            raise ShapeError(f"prompt_length must be >= 1, got {self.prompt_length}")
        if not self.entries:
            raise ShapeError("attention stack has no entries")
        for entry in self.entries:
            grid = np.asarray(entry.map)
            if grid.ndim != 3:
                raise ShapeError(
                    f"entry (layer {entry.layer_id}, t {entry.timestep}) must be "
                    f"H x W x L, got shape {grid.shape}"
                )
            h, w, length = grid.shape
            if h < 1 or w < 1:
                raise ShapeError(f"entry spatial dims must be >= 1, got {h}x{w}")
            if length != self.prompt_length:
                raise ShapeError(
                    f"entry token axis {length} != prompt_length {self.prompt_length}"
                )
            if np.any(grid < 0):
                raise ShapeError("attention values must be nonnegative")
            row_sums = grid.sum(axis=-1)
            if np.max(np.abs(row_sums - 1.0)) > ROW_SUM_TOL:
                raise ShapeError("attention rows must sum to 1 within 1e-6")


@dataclass(frozen=True)
class NounSpan:
    instance_id: int
    noun: str
    token_indices: tuple[int, ...]


@dataclass
class TokenAlignment:
    """Maps each noun/instance of a prompt to its token indices."""

    prompt: str
    tokens: list[str]
    noun_spans: list[NounSpan] = field(default_factory=list)

    def validate(self, prompt_length: int | None = None) -> None:
        length = len(self.tokens) if prompt_length is None else prompt_length
        seen_ids = set()
        if not self.noun_spans:
            raise AlignmentError("alignment has no noun spans")
        for span in self.noun_spans:
            if not span.token_indices:
                raise AlignmentError(f"noun {span.noun!r} has an empty token span")
            if span.instance_id in seen_ids:
                raise AlignmentError(f"duplicate instance_id {span.instance_id}")
            seen_ids.add(span.instance_id)
            for idx in span.token_indices:
                if idx < 0 or idx >= length:
                    raise AlignmentError(
                        f"token index {idx} out of range for prompt length {length}"
                    )


def softmax_last_axis(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the trailing axis."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def cross_attention(q: np.ndarray, k: np.ndarray, d: int) -> np.ndarray:
    """Token-attention grid softmax(Q K^T / sqrt(d)) for one layer/timestep.

    Args:
        q: visual queries, H x W x C.
        k: text keys, L x C.
        d: scaling dimension, >= 1.

    Returns:
        H x W x L grid whose every spatial position sums to 1.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 3:
        raise ShapeError(f"Q must be H x W x C, got shape {q.shape}")
    if k.ndim != 2:
        raise ShapeError(f"K must be L x C, got shape {k.shape}")
    if q.shape[2] != k.shape[1]:
        raise ShapeError(
            f"feature axes disagree: Q has C={q.shape[2]}, K has C={k.shape[1]}"
        )
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    logits = np.einsum("hwc,lc->hwl", q, k) / np.sqrt(float(d))
    return softmax_last_axis(logits)


def select_token_maps(
    stack: AttentionStack, alignment: TokenAlignment
) -> dict[int, list[np.ndarray]]:
    """Per-instance raw map lists, one H_i x W_i map per stack entry.

    Multi-token nouns contribute the elementwise mean of their token slices.
    """
    stack.validate()
    alignment.validate(prompt_length=stack.prompt_length)
    selected: dict[int, list[np.ndarray]] = {}
    for span in alignment.noun_spans:
        maps = []
        idx = list(span.token_indices)
        for entry in stack.entries:
            maps.append(np.asarray(entry.map, dtype=np.float64)[:, :, idx].mean(axis=-1))
        selected[span.instance_id] = maps
    return selected


def aggregate_maps(maps: list[np.ndarray], target_h: int, target_w: int) -> np.ndarray:
    """Resize every map to the target grid and average with equal weight."""
    if not maps:
        raise ValueError("cannot aggregate an empty map list")
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target dims must be >= 1, got {target_h}x{target_w}")
    resized = [bilinear_resize(m, target_h, target_w) for m in maps]
    return np.mean(np.stack(resized, axis=0), axis=0)


def normalize_map(grid: np.ndarray) -> np.ndarray:
    """Min-max normalize into [0, 1]; a constant map becomes all zeros."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 1:
        raise ShapeError("cannot normalize an empty map")
    lo = grid.min()
    hi = grid.max()
    if hi == lo:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def extract_instance_masks(
    stack: AttentionStack,
    alignment: TokenAlignment,
    target_h: int,
    target_w: int,
) -> dict[int, np.ndarray]:
    """Full path from a raw stack to one normalized mask per instance."""
    selected = select_token_maps(stack, alignment)
    return {
        instance_id: normalize_map(aggregate_maps(maps, target_h, target_w))
        for instance_id, maps in selected.items()
    }
