"""Deterministic toy scene generator with ground-truth masks and simulated
cross-attention stacks.

This is the verification substrate that stands in for a live text-to-image
model: every scene is a seeded composition of colored shapes, its truth masks
are exact integer rasterizations (no anti-aliasing, so IoU arithmetic is
exact), and `simulate_attention` emits stacks that satisfy every invariant the
extraction code expects from a real generator.

Numeric layout of simulated rows: noun tokens carry LAMBDA * d, where d is the
block-mean downsample of that instance's truth mask at the stack resolution
(canvas / 4, i.e. 4 px cells) perturbed by seeded smooth noise; filler tokens
carry a small constant; the leading background/BOS token absorbs the residual
so each row sums to exactly 1. LAMBDA and the filler value are powers of two,
so at noise 0 the full extract-aggregate-normalize path reproduces d bitwise
and binarization at 0.5 recovers the downsampled truth footprint exactly
(provided the instance fully covers at least one 4 px cell, which the default
scale ranges guarantee).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionEntry, AttentionStack, NounSpan, TokenAlignment
from .errors import PlacementError, ShapeError
from .interp import bilinear_resize, block_mean
from .prompts import scene_caption, tokenize
from .seeding import derive_seed

LAMBDA = 1.0 / 16.0  # noun-token scale; dyadic so noiseless recovery is exact
FILLER_VALUE = 1.0 / 256.0
BOS_TOKEN = "<bos>"
MAX_INSTANCES = 8
OCCLUSION_BOUND = 0.2  # pairwise overlap cap, fraction of the smaller footprint

SHAPES = ("disk", "square", "triangle")

# noun -> (shape, color family); classes differ by shape x warm/cool hue
NOUN_STYLES: dict[str, tuple[str, str]] = {
    "ball": ("disk", "warm"),
    "plate": ("disk", "cool"),
    "box": ("square", "warm"),
    "tile": ("square", "cool"),
    "cone": ("triangle", "warm"),
    "flag": ("triangle", "cool"),
}


@dataclass(frozen=True)
class InstanceSpec:
    noun: str
    shape: str
    cx: int
    cy: int
    scale: int
    color: tuple[int, int, int]


@dataclass
class SceneSpec:
    canvas_h: int
    canvas_w: int
    instances: list[InstanceSpec]
    background: tuple[int, int, int]
    seed: int

    def validate(self) -> None:
        if self.canvas_h < 16 or self.canvas_w < 16:
            raise ShapeError("canvas must be at least 16x16")
        if self.canvas_h % 4 or self.canvas_w % 4:
            raise ShapeError("canvas dims must be multiples of 4")
        if not 1 <= len(self.instances) <= MAX_INSTANCES:
            raise PlacementError(
                f"instance count must be in [1, {MAX_INSTANCES}], got {len(self.instances)}"
            )
        for inst in self.instances:
            if inst.shape not in SHAPES:
                raise ShapeError(f"unknown shape {inst.shape!r}")
            if inst.scale < 1:
                raise ShapeError(f"scale must be >= 1, got {inst.scale}")
            if not (0 <= inst.cx < self.canvas_w and 0 <= inst.cy < self.canvas_h):
                raise PlacementError(
                    f"center ({inst.cx}, {inst.cy}) outside {self.canvas_h}x{self.canvas_w} canvas"
                )


@dataclass
class OracleScene:
    image: np.ndarray  # H x W x 3 uint8
    truth_masks: list[np.ndarray]  # per instance, H x W uint8 in {0, 1}
    prompt: str
    alignment: TokenAlignment


def rasterize_shape(shape: str, cx: int, cy: int, scale: int, h: int, w: int) -> np.ndarray:
    """Integer rasterization of one shape footprint on pixel centers."""
    ys, xs = np.ogrid[0:h, 0:w]
    if shape == "disk":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= scale**2
    elif shape == "square":
        inside = (np.abs(xs - cx) <= scale) & (np.abs(ys - cy) <= scale)
    elif shape == "triangle":
        # isoceles, apex up: apex (cx, cy-s), base corners (cx -/+ s, cy+s)
        inside = (
            (ys >= cy - scale)
            & (ys <= cy + scale)
            & (2 * np.abs(xs - cx) <= (ys - cy + scale))
        )
    else:
        raise ShapeError(f"unknown shape {shape!r}")
    return inside.astype(np.uint8)


def build_alignment(prompt: str, nouns: list[str]) -> TokenAlignment:
    """Token alignment for a prompt: BOS token first, then word tokens.

    Each instance binds to the next unused occurrence of its noun's token
    sequence, so duplicate nouns resolve in instance order.
    """
    tokens = [BOS_TOKEN] + tokenize(prompt)
    used: set[int] = set()
    spans = []
    for instance_id, noun in enumerate(nouns):
        noun_tokens = tokenize(noun)
        if not noun_tokens:
            raise PlacementError(f"noun {noun!r} has no tokens")
        found = None
        for start in range(1, len(tokens) - len(noun_tokens) + 1):
            if start in used:
                continue
            if tokens[start : start + len(noun_tokens)] == noun_tokens:
                found = tuple(range(start, start + len(noun_tokens)))
                break
        if found is None:
            raise PlacementError(f"noun {noun!r} not found in prompt {prompt!r}")
        used.update(found)
        spans.append(NounSpan(instance_id=instance_id, noun=noun, token_indices=found))
    return TokenAlignment(prompt=prompt, tokens=tokens, noun_spans=spans)


def generate_scene(spec: SceneSpec) -> OracleScene:
    """Rasterize a scene; truth mask i is exactly instance i's footprint."""
    spec.validate()
    h, w = spec.canvas_h, spec.canvas_w
    masks = []
    for inst in spec.instances:
        mask = rasterize_shape(inst.shape, inst.cx, inst.cy, inst.scale, h, w)
        if mask.sum() == 0:
            raise PlacementError(f"instance {inst.noun!r} rasterized to an empty mask")
        masks.append(mask)
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            overlap = int(np.logical_and(masks[i], masks[j]).sum())
            smaller = min(int(masks[i].sum()), int(masks[j].sum()))
            if overlap > OCCLUSION_BOUND * smaller:
                raise PlacementError(
                    f"instances {i} and {j} overlap {overlap} px, above "
                    f"{OCCLUSION_BOUND:.0%} of the smaller footprint ({smaller} px)"
                )
    image = np.empty((h, w, 3), dtype=np.uint8)
    image[:] = np.asarray(spec.background, dtype=np.uint8)
    for inst, mask in zip(spec.instances, masks):
        image[mask.astype(bool)] = np.asarray(inst.color, dtype=np.uint8)
    nouns = [inst.noun for inst in spec.instances]
    prompt = scene_caption(nouns)
    return OracleScene(
        image=image,
        truth_masks=masks,
        prompt=prompt,
        alignment=build_alignment(prompt, nouns),
    )


def _smooth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Seeded smooth noise in [-1, 1]: coarse gaussian, upsampled, squashed."""
    ch = max(2, h // 4)
    cw = max(2, w // 4)
    coarse = rng.normal(size=(ch, cw))
    field = bilinear_resize(coarse, h, w) / 2.5
    return np.clip(field, -1.0, 1.0)


def simulate_attention(
    scene: OracleScene,
    noise_level: float,
    layers: int,
    timesteps: int,
    seed: int,
) -> AttentionStack:
    """Simulated cross-attention stack for a scene.

    Every (layer, timestep) entry shares one grid size (canvas / 4) so that
    cross-entry averaging of the noiseless stack is exact; layers and
    timesteps differ only in their independent noise fields, which is what
    makes aggregation across entries actually suppress noise.
    """
    if layers < 1 or timesteps < 1:
        raise ValueError("layers and timesteps must both be >= 1")
    if not 0.0 <= noise_level < 1.0:
        raise ValueError(f"noise_level must be in [0, 1), got {noise_level}")
    h, w = scene.image.shape[:2]
    res_h, res_w = h // 4, w // 4
    length = len(scene.alignment.tokens)
    down = [block_mean(m.astype(np.float64), res_h, res_w) for m in scene.truth_masks]
    span_by_instance = {s.instance_id: s for s in scene.alignment.noun_spans}
    noun_token_idx = {
        idx for span in scene.alignment.noun_spans for idx in span.token_indices
    }
    entries = []
    for layer in range(layers):
        for t in range(timesteps):
            rng = np.random.default_rng(derive_seed(seed, layer, t))
            grid = np.zeros((res_h, res_w, length), dtype=np.float64)
            for instance_id, d in enumerate(down):
                if noise_level > 0.0:
                    noisy = np.clip(d + noise_level * _smooth_field(rng, res_h, res_w), 0.0, 1.0)
                else:
                    noisy = d
                for token_idx in span_by_instance[instance_id].token_indices:
                    grid[:, :, token_idx] = LAMBDA * noisy
            for token_idx in range(1, length):
                if token_idx not in noun_token_idx:
                    grid[:, :, token_idx] = FILLER_VALUE
            grid[:, :, 0] = 1.0 - grid[:, :, 1:].sum(axis=-1)
            if np.any(grid[:, :, 0] < 0):
                raise ShapeError("BOS absorption underflow; too many instances")
            entries.append(AttentionEntry(layer_id=layer, timestep=t, map=grid))
    stack = AttentionStack(entries=entries, prompt_length=length)
    stack.validate()
    return stack


def _sample_color(rng: np.random.Generator, family: str) -> tuple[int, int, int]:
    if family == "warm":
        r = int(rng.integers(170, 256))
        g = int(rng.integers(60, 181))
        b = int(rng.integers(40, 121))
    else:
        r = int(rng.integers(40, 121))
        g = int(rng.integers(80, 201))
        b = int(rng.integers(170, 256))
    return (r, g, b)


def random_scene_spec(
    seed: int,
    canvas_h: int = 128,
    canvas_w: int = 128,
    min_instances: int = 2,
    max_instances: int = 4,
    min_scale: int = 12,
    max_scale: int = 22,
    nouns: tuple[str, ...] | None = None,
    max_tries: int = 300,
) -> SceneSpec:
    """Seeded random scene whose instances satisfy the occlusion bound.

    Placement is rejection-sampled against exact rasterized footprints, so
    `generate_scene` on the result never raises. Nouns are drawn without
    replacement from the style pool.
    """
    pool = tuple(nouns) if nouns is not None else tuple(NOUN_STYLES)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(min_instances, max_instances + 1))
    if n > len(pool):
        raise PlacementError(f"need {n} distinct nouns but pool has {len(pool)}")
    chosen = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
    background = tuple(int(v) for v in rng.integers(25, 76, size=3))
    placed: list[InstanceSpec] = []
    placed_masks: list[np.ndarray] = []
    for noun in chosen:
        shape, family = NOUN_STYLES[noun]
        color = _sample_color(rng, family)
        for attempt in range(max_tries):
            scale = int(rng.integers(min_scale, max_scale + 1))
            margin = scale + 1
            if 2 * margin >= canvas_w or 2 * margin >= canvas_h:
                raise PlacementError(f"scale {scale} too large for canvas")
            cx = int(rng.integers(margin, canvas_w - margin))
            cy = int(rng.integers(margin, canvas_h - margin))
            mask = rasterize_shape(shape, cx, cy, scale, canvas_h, canvas_w)
            area = int(mask.sum())
            ok = all(
                int(np.logical_and(mask, other).sum())
                <= OCCLUSION_BOUND * min(area, int(other.sum()))
                for other in placed_masks
            )
            if ok:
                placed.append(
                    InstanceSpec(noun=noun, shape=shape, cx=cx, cy=cy, scale=scale, color=color)
                )
                placed_masks.append(mask)
                break
        else:
            raise PlacementError(
                f"could not place instance {noun!r} within {max_tries} tries"
            )
    return SceneSpec(
        canvas_h=canvas_h,
        canvas_w=canvas_w,
        instances=placed,
        background=background,
        seed=seed,
    )
