"""Deterministic prompt construction.

Two jobs live here: class-label augmentation through seeded slot-filling
templates (a pluggable stand-in for a live LLM rewriter), and position-aware
prompt rendering ("The {noun} is in block {block}.") plus caption composition
for vision-language pretraining data.
"""

from __future__ import annotations

import json
import re
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from random import Random

_POSITION_PATTERN = re.compile(r"^The (.+) is in block ([0-9]+)\.$")
_POSITION_FRAGMENT = re.compile(r"The .+? is in block [0-9]+\.")


@dataclass(frozen=True)
class PromptTemplate:
    """A slot pattern plus the slot names it needs filled."""

    template_id: str
    pattern: str
    slots: tuple[str, ...]


TEMPLATES: dict[str, PromptTemplate] = {
    "base": PromptTemplate("base", "a photo of {class_name}", ()),
    "class_place": PromptTemplate(
        "class_place", "{class_name} {is_are} {place}", ("place",)
    ),
    "class_with_other_place": PromptTemplate(
        "class_with_other_place",
        "{class_name} with {other_class} {is_are} {place}",
        ("other_class", "place"),
    ),
    "class_with_other_action_place": PromptTemplate(
        "class_with_other_action_place",
        "{class_name} with {other_class} {is_are} {action} {place}",
        ("other_class", "action", "place"),
    ),
}

# Plural lexicon for is/are resolution; anything not listed reads as singular.
PLURAL_CLASSES = frozenset(
    {"balls", "boxes", "cones", "dogs", "cats", "people", "plates", "tiles", "flags"}
)

_SLOT_VOCAB_ATTR = {"other_class": "other_classes", "place": "places", "action": "actions"}


@dataclass(frozen=True)
class Vocabulary:
    """Slot vocabularies; file form is plain UTF-8 text, one entry per line."""

    other_classes: tuple[str, ...]
    places: tuple[str, ...]
    actions: tuple[str, ...]

    @classmethod
    def from_dir(cls, path: str | Path) -> "Vocabulary":
        root = Path(path)

        def read(name: str) -> tuple[str, ...]:
            lines = (root / name).read_text(encoding="utf-8").splitlines()
            return tuple(line.strip() for line in lines if line.strip())

        return cls(
            other_classes=read("other_classes.txt"),
            places=read("places.txt"),
            actions=read("actions.txt"),
        )


def default_vocabulary() -> Vocabulary:
    return Vocabulary(
        other_classes=("a ball", "a box", "a cone", "a plate", "a tile", "a flag"),
        places=(
            "in a park",
            "on a table",
            "at the beach",
            "in a field",
            "on the floor",
            "near a window",
        ),
        actions=("resting", "lying", "standing", "leaning", "sitting"),
    )


def is_plural(class_name: str) -> bool:
    return class_name.strip().lower() in PLURAL_CLASSES


def augment_prompt(
    class_name: str,
    vocab: Vocabulary,
    template_id: str = "class_place",
    seed: int = 0,
) -> str:
    """Fill a template's slots deterministically from the vocabulary.

    The same (inputs, seed) always renders the same sentence, and the class
    name appears verbatim in the output.
    """
    if template_id not in TEMPLATES:
        raise KeyError(f"unknown template_id {template_id!r}")
    if not class_name.strip():
        raise ValueError("class_name must be nonempty")
    template = TEMPLATES[template_id]
    rng = Random(seed)
    fills = {"class_name": class_name, "is_are": "are" if is_plural(class_name) else "is"}
    for slot in template.slots:
        options = getattr(vocab, _SLOT_VOCAB_ATTR[slot])
        if not options:
            raise ValueError(f"vocabulary for slot {slot!r} is empty")
        fills[slot] = rng.choice(options)
    return template.pattern.format(**fills)


@dataclass(frozen=True)
class PositionPrompt:
    """One object's grid location rendered as text."""

    noun: str
    block: int
    rendered: str


def position_prompt(noun: str, block: int) -> PositionPrompt:
    """Render "The {noun} is in block {block}."."""
    if not noun.strip():
        raise ValueError("noun must be nonempty")
    if block < 0:
        raise ValueError(f"block must be >= 0, got {block}")
    return PositionPrompt(noun=noun, block=block, rendered=f"The {noun} is in block {block}.")


def parse_position_prompt(text: str) -> tuple[str, int]:
    """Inverse of position_prompt; raises ValueError on anything off-template."""
    match = _POSITION_PATTERN.match(text)
    if match is None:
        raise ValueError(f"not a position prompt: {text!r}")
    return match.group(1), int(match.group(2))


def compose_vlp_text(caption: str, prompts: list[PositionPrompt]) -> str:
    """Caption followed by each rendered prompt, single-space separated."""
    parts = [caption] + [p.rendered for p in prompts]
    return " ".join(parts)


def parse_vlp_text(text: str) -> tuple[str, list[tuple[str, int]]]:
    """Split composed text back into (caption, [(noun, block), ...]).

    Assumes the caption itself contains no position-prompt fragment, which
    holds for all captions this library produces.
    """
    fragments = _POSITION_FRAGMENT.findall(text)
    if not fragments:
        return text, []
    caption = text[: text.index(fragments[0])].rstrip()
    return caption, [parse_position_prompt(f) for f in fragments]


def scene_caption(nouns: list[str]) -> str:
    """Deterministic caption for a multi-instance scene."""
    if not nouns:
        raise ValueError("need at least one noun")
    return "a photo of " + " and ".join(nouns)


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation is stripped, not kept."""
    return re.findall(r"[a-z0-9]+", text.lower())


class AugmentationServiceClient:
    """Optional HTTP client for an external text-augmentation service.

    Wire format: POST JSON {"class": ..., "template": ...} and receive
    {"sentence": ...}. Core functionality never requires this; the seeded
    template engine above is the default augmentation path.
    """

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def augment(self, class_name: str, template_id: str) -> str:
        payload = json.dumps({"class": class_name, "template": template_id}).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=payload, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(request, timeout=self.timeout) as response:
            body = json.loads(response.read().decode("utf-8"))
        return body["sentence"]
