"""Instance-level contrastive learning built on per-instance attention masks.

The unit of contrast is an instance, not an image: each instance's mask is
attentively pooled over the encoder's feature grid into one vector, the two
crops of the same instance form the positive pair, and every other instance,
in either crop, plus an optional FIFO memory bank, supplies negatives. The
strict `same_view` negative mode keeps only one crop's instances in the
denominator; the `union` mode (default) is what training uses.

Loss and pooling functions are pure; MemoryBank is single-writer by contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateMaskError, EmptyBatchError, ShapeError
from .geometry import ViewTransform, mask_present, transform_mask
from .interp import bilinear_resize_channels

NEGATIVE_MODES = ("union", "same_view")
UNIT_NORM_TOL = 1e-5
_SIM_SLACK = 1e-6


def attentive_pool(z: torch.Tensor, a: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Mask-weighted spatial mean of a feature grid.

    Args:
        z: features, h x w x c.
        a: attention mask, h x w, already resized to the grid; must have
           positive total mass (filter absent instances before calling).

    Returns:
        c-vector: sum_ij a_ij z_ij / sum_ij a_ij.
    """
    if z.ndim != 3:
        raise ShapeError(f"z must be h x w x c, got shape {tuple(z.shape)}")
    a = torch.as_tensor(a, dtype=z.dtype, device=z.device)
    if a.shape != z.shape[:2]:
        raise ShapeError(
            f"mask shape {tuple(a.shape)} does not match feature grid {tuple(z.shape[:2])}"
        )
    total = a.sum()
    if total <= 0:
        raise DegenerateMaskError("attentive_pool needs a mask with positive mass")
    return (a.unsqueeze(-1) * z).sum(dim=(0, 1)) / total


def cosine_sim(u, v) -> float:
    """Cosine similarity of two vectors; raises on zero norm."""
    u = torch.as_tensor(u, dtype=torch.float64).reshape(-1)
    v = torch.as_tensor(v, dtype=torch.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"vector shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(u @ v / (nu * nv))


def instance_nce_loss(
    pos_sim: float, neg_sims: list[float], temperature: float = 1.0
) -> float:
    """NCE loss for one anchor from scalar similarities, in log-sum-exp form.

    -log[exp(p/t) / (exp(p/t) + sum_n exp(n/t))]; exactly 0.0 with no
    negatives.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    sims = [pos_sim] + list(neg_sims)
    if any(s < -1.0 - _SIM_SLACK or s > 1.0 + _SIM_SLACK for s in sims):
        raise ValueError("similarities must lie in [-1, 1]")
    if not neg_sims:
        return 0.0
    scaled = [s / temperature for s in sims]
    peak = max(scaled)
    lse = peak + math.log(sum(math.exp(s - peak) for s in scaled))
    return lse - scaled[0]


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    an = a / torch.linalg.vector_norm(a, dim=1, keepdim=True)
    bn = b / torch.linalg.vector_norm(b, dim=1, keepdim=True)
    return an @ bn.T


def _directional_loss(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    same_view: torch.Tensor,
    cross_view: torch.Tensor | None,
    bank_feats: torch.Tensor | None,
    temperature: float,
) -> torch.Tensor:
    m = anchors.shape[0]
    pos = torch.diagonal(_cosine_matrix(anchors, positives)) / temperature
    off_diag = ~torch.eye(m, dtype=torch.bool, device=anchors.device)
    neg_cols = [_cosine_matrix(anchors, same_view) / temperature]
    neg_masks = [off_diag]
    if cross_view is not None:
        neg_cols.append(_cosine_matrix(anchors, cross_view) / temperature)
        neg_masks.append(off_diag)
    if bank_feats is not None and bank_feats.shape[0] > 0:
        neg_cols.append(
            _cosine_matrix(anchors, bank_feats.to(anchors.dtype)) / temperature
        )
        neg_masks.append(
            torch.ones(m, bank_feats.shape[0], dtype=torch.bool, device=anchors.device)
        )
    logits = torch.cat([pos.unsqueeze(1)] + neg_cols, dim=1)
    keep = torch.cat(
        [torch.ones(m, 1, dtype=torch.bool, device=anchors.device)] + neg_masks, dim=1
    )
    neg_inf = torch.tensor(float("-inf"), dtype=anchors.dtype, device=anchors.device)
    masked = torch.where(keep, logits, neg_inf)
    return (torch.logsumexp(masked, dim=1) - pos).mean()


def batch_instance_loss(
    feats_a: torch.Tensor,
    feats_b: torch.Tensor,
    temperature: float = 1.0,
    negatives: str = "union",
    bank: "MemoryBank | None" = None,
) -> torch.Tensor:
    """Symmetrized instance NCE over a batch of shared instances.

    Rows m of feats_a / feats_b are the two views of instance m (instances
    from all images in the batch are concatenated). Each anchor's positive is
    its own row in the other view; negatives are every other row, same-view
    only in `same_view` mode, same-view plus cross-view in `union` mode, plus
    the memory bank contents when a bank is given. Returns the mean over all
    2M anchors.
    """
    if feats_a.ndim != 2 or feats_b.ndim != 2 or feats_a.shape != feats_b.shape:
        raise ShapeError(
            f"feature matrices must be matching M x C, got "
            f"{tuple(feats_a.shape)} and {tuple(feats_b.shape)}"
        )
    if feats_a.shape[0] < 1:
        raise EmptyBatchError("batch has no shared instances")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if negatives not in NEGATIVE_MODES:
        raise ValueError(f"negatives must be one of {NEGATIVE_MODES}, got {negatives!r}")
    bank_feats = bank.tensor() if bank is not None and len(bank) else None
    cross = negatives == "union"
    loss_a = _directional_loss(
        feats_a, feats_b, feats_a, feats_b if cross else None, bank_feats, temperature
    )
    loss_b = _directional_loss(
        feats_b, feats_a, feats_b, feats_a if cross else None, bank_feats, temperature
    )
    return 0.5 * (loss_a + loss_b)


def image_level_nce(
    feats_a: torch.Tensor, feats_b: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Standard two-view NT-Xent over image-level features.

    Kept as an independent formulation (2M x 2M similarity matrix with the
    diagonal masked) rather than delegating to batch_instance_loss, so the
    two can cross-check each other in the single-instance case.
    """
    if feats_a.ndim != 2 or feats_a.shape != feats_b.shape:
        raise ShapeError("feature matrices must be matching M x C")
    m = feats_a.shape[0]
    if m < 1:
        raise EmptyBatchError("batch is empty")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    allf = torch.cat([feats_a, feats_b], dim=0)
    sim = _cosine_matrix(allf, allf) / temperature
    eye = torch.eye(2 * m, dtype=torch.bool, device=allf.device)
    neg_inf = torch.tensor(float("-inf"), dtype=allf.dtype, device=allf.device)
    sim = torch.where(eye, neg_inf, sim)
    targets = torch.cat(
        [torch.arange(m, 2 * m, device=allf.device), torch.arange(0, m, device=allf.device)]
    )
    pos = sim[torch.arange(2 * m, device=allf.device), targets]
    return (torch.logsumexp(sim, dim=1) - pos).mean()


class MemoryBank:
    """FIFO queue of unit-norm instance features used as extra negatives.

    Single-writer: exactly one training loop pushes; reads between steps are
    safe. Eviction is strictly oldest-first once capacity is reached.
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._rows: list[torch.Tensor] = []
        self._tags: list[int] = []
        self._dtype = dtype

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def tags(self) -> tuple[int, ...]:
        return tuple(self._tags)

    def push(self, feats: torch.Tensor, tags: list[int] | None = None) -> None:
        feats = feats.detach()
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise ShapeError(f"expected N x {self.dim} features, got {tuple(feats.shape)}")
        norms = torch.linalg.vector_norm(feats, dim=1)
        if torch.any(torch.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError("memory bank rows must be unit-norm within 1e-5")
        if tags is None:
            tags = [-1] * feats.shape[0]
        if len(tags) != feats.shape[0]:
            raise ShapeError("one tag per pushed row required")
        for row, tag in zip(feats.to(self._dtype), tags):
            self._rows.append(row.clone())
            self._tags.append(int(tag))
            if len(self._rows) > self.capacity:
                self._rows.pop(0)
                self._tags.pop(0)

    def tensor(self) -> torch.Tensor:
        if not self._rows:
            return torch.zeros((0, self.dim), dtype=self._dtype)
        return torch.stack(self._rows, dim=0)


@dataclass
class EncoderPair:
    """Query/key encoder pair with a momentum coefficient for EMA updates."""

    query: torch.nn.Module
    key: torch.nn.Module
    momentum: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")


@torch.no_grad()
def ema_update(pair: EncoderPair) -> None:
    """key <- m * key + (1 - m) * query, elementwise over parameters."""
    q_params = list(pair.query.parameters())
    k_params = list(pair.key.parameters())
    if len(q_params) != len(k_params):
        raise ShapeError("encoder pair parameter lists differ in length")
    for qp, kp in zip(q_params, k_params):
        if qp.shape != kp.shape:
            raise ShapeError(
                f"parameter shape mismatch: {tuple(qp.shape)} vs {tuple(kp.shape)}"
            )
        kp.mul_(pair.momentum).add_(qp, alpha=1.0 - pair.momentum)


@dataclass(frozen=True)
class AugConfig:
    """Two-view augmentation ranges for make_view_pair."""

    crop_scale: tuple[float, float] = (0.5, 1.0)  # per-axis side fraction
    hflip_prob: float = 0.5
    jitter: float = 0.2  # photometric brightness/contrast half-range
    out_h: int = 64
    out_w: int = 64


@dataclass
class ViewData:
    image: np.ndarray  # out_h x out_w x 3 float in [0, 1]
    transform: ViewTransform
    masks: dict[int, np.ndarray]


@dataclass
class ViewPair:
    """Two augmented crops with per-instance masks transformed in lockstep."""

    view_a: ViewData
    view_b: ViewData
    shared_instances: tuple[int, ...]


def _sample_transform(
    rng: np.random.Generator, src_h: int, src_w: int, aug: AugConfig
) -> ViewTransform:
    lo, hi = aug.crop_scale
    crop_w = max(1, round(src_w * rng.uniform(lo, hi)))
    crop_h = max(1, round(src_h * rng.uniform(lo, hi)))
    x0 = int(rng.integers(0, src_w - crop_w + 1))
    y0 = int(rng.integers(0, src_h - crop_h + 1))
    return ViewTransform(
        crop_x0=x0,
        crop_y0=y0,
        crop_w=crop_w,
        crop_h=crop_h,
        hflip=bool(rng.random() < aug.hflip_prob),
        out_h=aug.out_h,
        out_w=aug.out_w,
    )


def _apply_to_image(
    image: np.ndarray, t: ViewTransform, rng: np.random.Generator, jitter: float
) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    crop = img[t.crop_y0 : t.crop_y0 + t.crop_h, t.crop_x0 : t.crop_x0 + t.crop_w]
    if t.hflip:
        crop = crop[:, ::-1]
    out = bilinear_resize_channels(crop, t.out_h, t.out_w)
    if jitter > 0:
        brightness = rng.uniform(1.0 - jitter, 1.0 + jitter)
        contrast = rng.uniform(1.0 - jitter, 1.0 + jitter)
        mean = out.mean()
        out = (out - mean) * contrast + mean * brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_view_pair(
    image: np.ndarray,
    masks: dict[int, np.ndarray],
    aug: AugConfig,
    seed: int,
    max_attempts: int = 10,
) -> ViewPair:
    """Two seeded augmented views with masks transformed in lockstep.

    Geometric transforms apply identically to the image and every mask;
    photometric jitter touches the image only. If a sampled view loses every
    instance, both views are resampled, up to max_attempts, before raising.
    """
    if not masks:
        raise ValueError("need at least one instance mask")
    src_h, src_w = np.asarray(image).shape[:2]
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        views = []
        for _view in ("a", "b"):
            t = _sample_transform(rng, src_h, src_w, aug)
            view_image = _apply_to_image(image, t, rng, aug.jitter)
            view_masks = {
                iid: transform_mask(m, t) for iid, m in masks.items()
            }
            views.append(ViewData(image=view_image, transform=t, masks=view_masks))
        present = [
            {iid for iid, m in v.masks.items() if mask_present(m)} for v in views
        ]
        if all(present):
            shared = tuple(sorted(present[0] & present[1]))
            return ViewPair(view_a=views[0], view_b=views[1], shared_instances=shared)
    raise DegenerateMaskError(
        f"all instances absent from one view after {max_attempts} attempts"
    )
