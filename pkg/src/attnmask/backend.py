"""Generator backend interface: anything that can hand the pipeline an image
plus its cross-attention stack and token alignment.

Two implementations ship. `OracleBackend` wraps the deterministic scene
oracle and is what every test runs against. `DiffusionHookStub` documents the
contract for wiring a real text-to-image model and fails loudly until wired.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .attention import AttentionStack, TokenAlignment
from .errors import BackendError
from .oracle import generate_scene, random_scene_spec, simulate_attention


@dataclass
class GeneratedSample:
    """One backend output: image, attention stack, alignment, source prompt.

    truth_masks is populated only by backends that know ground truth (the
    oracle); real generators leave it None.
    """

    image: np.ndarray
    stack: AttentionStack
    alignment: TokenAlignment
    prompt: str
    truth_masks: list[np.ndarray] | None = None


@runtime_checkable
class GeneratorBackend(Protocol):
    name: str
    version: str

    def generate(self, seed: int) -> GeneratedSample:
        """Produce one sample; must be a pure function of the seed."""
        ...


@dataclass
class OracleBackend:
    """Scene-oracle backend: seeded random scenes with simulated stacks."""

    canvas_h: int = 128
    canvas_w: int = 128
    noise_level: float = 0.3
    layers: int = 3
    timesteps: int = 4
    min_instances: int = 2
    max_instances: int = 4
    min_scale: int = 12
    max_scale: int = 22
    name: str = field(default="scene_oracle", init=False)
    version: str = field(default="1", init=False)

    def generate(self, seed: int) -> GeneratedSample:
        spec = random_scene_spec(
            seed,
            canvas_h=self.canvas_h,
            canvas_w=self.canvas_w,
            min_instances=self.min_instances,
            max_instances=self.max_instances,
            min_scale=self.min_scale,
            max_scale=self.max_scale,
        )
        scene = generate_scene(spec)
        stack = simulate_attention(
            scene,
            noise_level=self.noise_level,
            layers=self.layers,
            timesteps=self.timesteps,
            seed=seed,
        )
        return GeneratedSample(
            image=scene.image,
            stack=stack,
            alignment=scene.alignment,
            prompt=scene.prompt,
            truth_masks=scene.truth_masks,
        )


@dataclass
class DiffusionHookStub:
    """Adapter skeleton for a real text-to-image diffusion generator.

    Wiring checklist for an implementer:
      * register forward hooks on every cross-attention module of the
        denoiser and record the softmaxed token-attention grid (averaged over
        heads) at each retained layer and sampling timestep;
      * build one AttentionEntry per (layer, timestep) with the grid reshaped
        to H x W x L, and an AttentionStack with the tokenizer's sequence
        length;
      * build the TokenAlignment from the tokenizer offsets of each noun in
        the prompt (one NounSpan per generated object);
      * return the decoded image as an H x W x 3 uint8 array.

    This stub carries the interface only; generate() always raises.
    """

    name: str = field(default="diffusion_stub", init=False)
    version: str = field(default="0", init=False)

    def generate(self, seed: int) -> GeneratedSample:
        raise BackendError(
            "diffusion backend is not wired to a live model; use the scene "
            "oracle or implement the hook contract documented on DiffusionHookStub"
        )


def make_backend(name: str, **kwargs) -> GeneratorBackend:
    if name == "oracle":
        return OracleBackend(**kwargs)
    if name == "diffusion_stub":
        return DiffusionHookStub()
    raise BackendError(f"unknown backend {name!r}")
