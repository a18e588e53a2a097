"""End-to-end dataset factory: generate scenes through a backend, extract and
aggregate per-noun masks, derive boxes/blocks/prompts, and write validated,
reproducible shards.

Shard layout: <root>/images/*.png, <root>/masks/*.png (16-bit single-channel,
value v encodes mask v/65535), <root>/records.jsonl, <root>/manifest.json.
Every artifact byte is a pure function of (config, record index): per-record
seeds come from FNV-1a over the global seed and index, so record i can be
regenerated alone and parallel runs agree with serial ones.
"""

from __future__ import annotations

import hashlib
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .attention import extract_instance_masks
from .backend import DiffusionHookStub, GeneratorBackend, OracleBackend
from .errors import BackendError, ConfigError
from .geometry import BlockGrid, BoundingBox, bbox, binarize, block_index
from .interp import bilinear_resize
from .masking import BetaSchedule, beta_at, patch_scores, plan_mask
from .prompts import (
    TEMPLATES,
    PositionPrompt,
    augment_prompt,
    compose_vlp_text,
    default_vocabulary,
    parse_vlp_text,
    position_prompt,
)
from .seeding import derive_seed, record_seed

MANIFEST_FORMAT = "attnmask-shard-v1"
_OVERLAY_PALETTE = (
    (255, 64, 64),
    (64, 160, 255),
    (80, 220, 100),
    (250, 200, 60),
    (200, 90, 230),
    (90, 230, 220),
    (250, 140, 50),
    (160, 160, 160),
)


@dataclass
class PipelineConfig:
    """Validated knobs for one generation run; unknown JSON keys are rejected."""

    backend: str = "oracle"
    count: int = 10
    canvas: int = 128
    noise_level: float = 0.3
    layers: int = 3
    timesteps: int = 4
    min_instances: int = 2
    max_instances: int = 4
    min_scale: int = 12
    max_scale: int = 22
    binarize_threshold: float = 0.5
    block_rows: int = 3
    block_cols: int = 3
    template_id: str = "class_place"
    output_dir: str = "shard"
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.backend not in ("oracle", "diffusion_stub"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.canvas < 32 or self.canvas % 4:
            raise ConfigError("canvas must be a multiple of 4 and at least 32")
        if not 0.0 <= self.noise_level < 1.0:
            raise ConfigError(f"noise_level must be in [0, 1), got {self.noise_level}")
        if self.layers < 1 or self.timesteps < 1:
            raise ConfigError("layers and timesteps must be >= 1")
        if not 1 <= self.min_instances <= self.max_instances <= 8:
            raise ConfigError("instance range must satisfy 1 <= min <= max <= 8")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError("binarize_threshold must be in (0, 1)")
        if self.block_rows < 1 or self.block_cols < 1:
            raise ConfigError("block grid must be >= 1x1")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.template_id not in TEMPLATES:
            raise ConfigError(f"unknown template_id {self.template_id!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "PipelineConfig":
        data = json.loads(payload)
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        config = cls(**data)
        config.validate()
        return config

    def make_backend(self) -> GeneratorBackend:
        if self.backend == "oracle":
            return OracleBackend(
                canvas_h=self.canvas,
                canvas_w=self.canvas,
                noise_level=self.noise_level,
                layers=self.layers,
                timesteps=self.timesteps,
                min_instances=self.min_instances,
                max_instances=self.max_instances,
                min_scale=self.min_scale,
                max_scale=self.max_scale,
            )
        return DiffusionHookStub()


@dataclass
class RecordInstance:
    instance_id: int
    noun: str
    mask_file: str
    bbox: BoundingBox | None
    block: int | None


@dataclass
class ShardRecord:
    """One generated sample with all derived annotations and provenance."""

    index: int
    image_file: str
    prompt: str
    augmented_prompt: str
    vlp_text: str
    instances: list[RecordInstance]
    seed: int
    generator: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "image_file": self.image_file,
            "prompt": self.prompt,
            "augmented_prompt": self.augmented_prompt,
            "vlp_text": self.vlp_text,
            "instances": [
                {
                    "instance_id": inst.instance_id,
                    "noun": inst.noun,
                    "mask_file": inst.mask_file,
                    "bbox": None
                    if inst.bbox is None
                    else {
                        "x0": inst.bbox.x0,
                        "y0": inst.bbox.y0,
                        "x1": inst.bbox.x1,
                        "y1": inst.bbox.y1,
                    },
                    "block": inst.block,
                }
                for inst in self.instances
            ],
            "seed": self.seed,
            "generator": dict(self.generator),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ShardRecord":
        instances = [
            RecordInstance(
                instance_id=int(inst["instance_id"]),
                noun=inst["noun"],
                mask_file=inst["mask_file"],
                bbox=None
                if inst["bbox"] is None
                else BoundingBox(
                    x0=int(inst["bbox"]["x0"]),
                    y0=int(inst["bbox"]["y0"]),
                    x1=int(inst["bbox"]["x1"]),
                    y1=int(inst["bbox"]["y1"]),
                ),
                block=None if inst["block"] is None else int(inst["block"]),
            )
            for inst in data["instances"]
        ]
        return cls(
            index=int(data["index"]),
            image_file=data["image_file"],
            prompt=data["prompt"],
            augmented_prompt=data["augmented_prompt"],
            vlp_text=data["vlp_text"],
            instances=instances,
            seed=int(data["seed"]),
            generator=dict(data["generator"]),
        )


@dataclass
class RecordBundle:
    """A fully built record plus the exact file bytes it references."""

    index: int
    record: dict
    files: dict[str, bytes]


@dataclass
class GenReport:
    root: Path
    written: int
    skipped: list[tuple[int, str]] = field(default_factory=list)
    manifest_digest: str = ""


@dataclass
class ShardReport:
    root: Path
    records_checked: int
    violations: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations


class ShardInvalid(RuntimeError):
    def __init__(self, report: ShardReport):
        super().__init__(
            f"shard {report.root} has {len(report.violations)} violation(s)"
        )
        self.report = report


def encode_image_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def quantize_mask(mask: np.ndarray) -> np.ndarray:
    """A mask's value after the 16-bit storage round-trip.

    Derived annotations (bbox, block) are computed from this, never from the
    raw float mask, so revalidating a shard from its files reproduces them
    exactly.
    """
    scaled = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    return np.round(scaled * 65535.0) / 65535.0


def encode_mask_png(mask: np.ndarray) -> bytes:
    """Store a [0, 1] mask as 16-bit grayscale; v encodes mask value v/65535."""
    scaled = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    quantized = np.round(scaled * 65535.0).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(quantized).save(buf, format="PNG")
    return buf.getvalue()


def decode_mask_png(path: Path) -> np.ndarray:
    arr = np.array(Image.open(path))
    return arr.astype(np.float64) / 65535.0


def build_record(config: PipelineConfig, index: int) -> RecordBundle:
    """Deterministically build record `index`; pure in (config, index)."""
    seed = record_seed(config.seed, index)
    backend = config.make_backend()
    sample = backend.generate(seed)
    canvas_h, canvas_w = sample.image.shape[:2]
    res_h, res_w = sample.stack.entries[0].map.shape[:2]
    masks = extract_instance_masks(sample.stack, sample.alignment, res_h, res_w)
    grid = BlockGrid(
        rows=config.block_rows, cols=config.block_cols, image_h=canvas_h, image_w=canvas_w
    )
    nouns = {s.instance_id: s.noun for s in sample.alignment.noun_spans}
    image_file = f"images/{index:06d}.png"
    files: dict[str, bytes] = {image_file: encode_image_png(sample.image)}
    instances: list[RecordInstance] = []
    prompts: list[PositionPrompt] = []
    for iid in sorted(masks):
        mask_canvas = np.clip(bilinear_resize(masks[iid], canvas_h, canvas_w), 0.0, 1.0)
        mask_file = f"masks/{index:06d}_{iid:02d}.png"
        files[mask_file] = encode_mask_png(mask_canvas)
        binary = binarize(quantize_mask(mask_canvas), config.binarize_threshold)
        box = bbox(binary)
        block = None if box is None else block_index(box, grid)
        if block is not None:
            prompts.append(position_prompt(nouns[iid], block))
        instances.append(
            RecordInstance(
                instance_id=iid, noun=nouns[iid], mask_file=mask_file, bbox=box, block=block
            )
        )
    augmented = augment_prompt(
        nouns[min(nouns)],
        default_vocabulary(),
        template_id=config.template_id,
        seed=derive_seed(seed, 101),
    )
    record = ShardRecord(
        index=index,
        image_file=image_file,
        prompt=sample.prompt,
        augmented_prompt=augmented,
        vlp_text=compose_vlp_text(sample.prompt, prompts),
        instances=instances,
        seed=seed,
        generator={"name": backend.name, "version": backend.version},
    )
    return RecordBundle(index=index, record=record.to_dict(), files=files)


def _record_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def _bundle_digest(bundle: RecordBundle) -> tuple[str, dict[str, str]]:
    file_digests = {
        rel: hashlib.sha256(data).hexdigest() for rel, data in sorted(bundle.files.items())
    }
    payload = _record_line(bundle.record) + "".join(
        f"{rel}:{digest}" for rel, digest in sorted(file_digests.items())
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest(), file_digests


def _build_worker(config_json: str, index: int) -> RecordBundle:
    return build_record(PipelineConfig.from_json(config_json), index)


def generate_dataset(config: PipelineConfig, log=None) -> GenReport:
    """Generate a full shard; backend failures skip the record and are
    reported (the CLI maps any skip to a nonzero exit)."""
    config.validate()
    log = log if log is not None else sys.stderr
    root = Path(config.output_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    bundles: list[RecordBundle] = []
    skipped: list[tuple[int, str]] = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {
                pool.submit(_build_worker, config.to_json(), i): i
                for i in range(config.count)
            }
            for future in as_completed(futures):
                index = futures[future]
                try:
                    bundles.append(future.result())
                except (BackendError, ValueError, RuntimeError) as exc:
                    skipped.append((index, str(exc)))
                    print(f"record {index} skipped: {exc}", file=log)
    else:
        for index in range(config.count):
            try:
                bundles.append(build_record(config, index))
            except (BackendError, ValueError, RuntimeError) as exc:
                skipped.append((index, str(exc)))
                print(f"record {index} skipped: {exc}", file=log)
    bundles.sort(key=lambda b: b.index)
    skipped.sort()
    manifest_records = []
    with (root / "records.jsonl").open("w", encoding="utf-8") as fout:
        for bundle in bundles:
            for rel, data in bundle.files.items():
                target = root / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
            digest, file_digests = _bundle_digest(bundle)
            manifest_records.append(
                {"index": bundle.index, "record_digest": digest, "files": file_digests}
            )
            fout.write(_record_line(bundle.record) + "\n")
    overall = hashlib.sha256(
        "".join(r["record_digest"] for r in manifest_records).encode("utf-8")
    ).hexdigest()
    backend = config.make_backend()
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": config.seed,
        "count": config.count,
        "generator": {"name": backend.name, "version": backend.version},
        "params": {
            "binarize_threshold": config.binarize_threshold,
            "block_rows": config.block_rows,
            "block_cols": config.block_cols,
        },
        "records": manifest_records,
        "digest": overall,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return GenReport(
        root=root, written=len(bundles), skipped=skipped, manifest_digest=overall
    )


def _safe_path(root: Path, rel: str) -> Path | None:
    candidate = (root / rel).resolve()
    try:
        candidate.relative_to(root.resolve())
    except ValueError:
        return None
    return candidate


def load_records(root: Path) -> list[ShardRecord]:
    lines = (root / "records.jsonl").read_text(encoding="utf-8").splitlines()
    return [ShardRecord.from_dict(json.loads(line)) for line in lines if line.strip()]


def validate_shard(shard_dir: str | Path) -> ShardReport:
    """Check every record invariant; violations are reported, never thrown."""
    root = Path(shard_dir)
    report = ShardReport(root=root, records_checked=0)
    if not root.is_dir():
        report.violations.append(f"shard directory {root} does not exist")
        return report
    records_path = root / "records.jsonl"
    if not records_path.is_file() or not records_path.read_text(encoding="utf-8").strip():
        report.violations.append("empty shard: no records.jsonl content")
        return report
    manifest = None
    manifest_path = root / "manifest.json"
    if manifest_path.is_file():
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            report.violations.append(f"manifest.json unreadable: {exc}")
    else:
        report.violations.append("manifest.json missing")
    threshold = 0.5
    rows = cols = 3
    if manifest and isinstance(manifest.get("params"), dict):
        threshold = float(manifest["params"].get("binarize_threshold", threshold))
        rows = int(manifest["params"].get("block_rows", rows))
        cols = int(manifest["params"].get("block_cols", cols))
    digests = {}
    if manifest:
        for rec in manifest.get("records", []):
            digests.update(rec.get("files", {}))
    try:
        records = load_records(root)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        report.violations.append(f"records.jsonl unreadable: {exc}")
        return report
    for record in records:
        name = f"record {record.index}"
        report.records_checked += 1
        line_roundtrip = ShardRecord.from_dict(record.to_dict()).to_dict()
        if line_roundtrip != record.to_dict():
            report.violations.append(f"{name}: serialization does not round-trip")
        image_path = _safe_path(root, record.image_file)
        image_hw = None
        if image_path is None or not image_path.is_file():
            report.violations.append(f"{name}: image file {record.image_file} missing")
        else:
            try:
                with Image.open(image_path) as im:
                    image_hw = (im.height, im.width)
            except Exception as exc:  # noqa: BLE001 - unreadable files are findings
                report.violations.append(f"{name}: image unreadable: {exc}")
        caption, parsed_positions = parse_vlp_text(record.vlp_text)
        if caption != record.prompt:
            report.violations.append(f"{name}: vlp_text does not start with the prompt")
        expected_positions = [
            (inst.noun, inst.block) for inst in record.instances if inst.block is not None
        ]
        if parsed_positions != expected_positions:
            report.violations.append(f"{name}: position prompts disagree with instances")
        if record.instances and record.instances[0].noun not in record.augmented_prompt:
            report.violations.append(f"{name}: augmented prompt drops the class name")
        for inst in record.instances:
            tag = f"{name} instance {inst.instance_id}"
            mask_path = _safe_path(root, inst.mask_file)
            if mask_path is None or not mask_path.is_file():
                report.violations.append(f"{tag}: mask file {inst.mask_file} missing")
                continue
            expected_digest = digests.get(inst.mask_file)
            actual = hashlib.sha256(mask_path.read_bytes()).hexdigest()
            if expected_digest is not None and actual != expected_digest:
                report.violations.append(f"{tag}: mask digest mismatch")
                continue
            try:
                mask = decode_mask_png(mask_path)
            except Exception as exc:  # noqa: BLE001
                report.violations.append(f"{tag}: mask unreadable: {exc}")
                continue
            if mask.ndim != 2 or mask.min() < 0.0 or mask.max() > 1.0:
                report.violations.append(f"{tag}: mask values outside [0, 1]")
                continue
            if image_hw is not None and mask.shape != image_hw:
                report.violations.append(f"{tag}: mask dims {mask.shape} != image {image_hw}")
            binary = binarize(mask, threshold)
            box = bbox(binary)
            if (box is None) != (inst.bbox is None):
                report.violations.append(f"{tag}: bbox nullness disagrees with mask")
            elif box is not None and box != inst.bbox:
                report.violations.append(f"{tag}: bbox {inst.bbox} != recomputed {box}")
            if (inst.bbox is None) != (inst.block is None):
                report.violations.append(f"{tag}: block must be null iff bbox is null")
            elif inst.bbox is not None and image_hw is not None:
                grid = BlockGrid(rows=rows, cols=cols, image_h=image_hw[0], image_w=image_hw[1])
                if block_index(inst.bbox, grid) != inst.block:
                    report.violations.append(f"{tag}: block index disagrees with bbox")
        if image_path is not None and image_path.is_file():
            expected_digest = digests.get(record.image_file)
            if expected_digest is not None:
                actual = hashlib.sha256(image_path.read_bytes()).hexdigest()
                if actual != expected_digest:
                    report.violations.append(f"{name}: image digest mismatch")
    return report


def render_overlays(shard_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Render one annotated PNG per record plus a JSON sidecar; refuses to
    run on a shard that fails validation."""
    report = validate_shard(shard_dir)
    if not report.clean:
        raise ShardInvalid(report)
    root = Path(shard_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    rows = int(manifest["params"]["block_rows"])
    cols = int(manifest["params"]["block_cols"])
    threshold = float(manifest["params"]["binarize_threshold"])
    written = []
    for record in load_records(root):
        image = np.array(Image.open(root / record.image_file).convert("RGB")).astype(np.float64)
        h, w = image.shape[:2]
        warnings = []
        for inst in record.instances:
            color = np.asarray(_OVERLAY_PALETTE[inst.instance_id % len(_OVERLAY_PALETTE)])
            mask = decode_mask_png(root / inst.mask_file)
            hot = binarize(mask, threshold).astype(bool)
            image[hot] = 0.55 * image[hot] + 0.45 * color
            if inst.bbox is None:
                warnings.append(f"instance {inst.instance_id} ({inst.noun}) absent: no bbox")
        canvas = Image.fromarray(np.clip(image, 0, 255).astype(np.uint8), mode="RGB")
        draw = ImageDraw.Draw(canvas)
        for r in range(1, rows):
            y = round(r * h / rows)
            draw.line([(0, y), (w - 1, y)], fill=(255, 255, 255), width=1)
        for c in range(1, cols):
            x = round(c * w / cols)
            draw.line([(x, 0), (x, h - 1)], fill=(255, 255, 255), width=1)
        for inst in record.instances:
            if inst.bbox is not None:
                color = _OVERLAY_PALETTE[inst.instance_id % len(_OVERLAY_PALETTE)]
                draw.rectangle(
                    [inst.bbox.x0, inst.bbox.y0, inst.bbox.x1 - 1, inst.bbox.y1 - 1],
                    outline=color,
                    width=2,
                )
        overlay_path = out / f"{record.index:06d}.png"
        canvas.save(overlay_path, format="PNG")
        sidecar = {
            "index": record.index,
            "vlp_text": record.vlp_text,
            "warnings": warnings,
        }
        (out / f"{record.index:06d}.json").write_text(
            json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8"
        )
        written.append(overlay_path)
    return written


def run_experiment(kind: str, options: dict, out_path: str | Path) -> Path:
    """Seeded toy experiments; metrics land in one deterministic JSON file."""
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if kind == "contrastive":
        from .training import TrainConfig, compare_modes, make_training_scenes

        scene_count = int(options.get("scenes", 200))
        scene_seed = int(options.get("scene_seed", options.get("seed", 0)))
        canvas = int(options.get("canvas", 112))
        scene_keys = ("min_instances", "max_instances", "min_scale", "max_scale")
        scene_kwargs = {k: int(options[k]) for k in scene_keys if k in options}
        config_keys = set(TrainConfig.__dataclass_fields__)
        config = TrainConfig(**{k: v for k, v in options.items() if k in config_keys})
        scenes = make_training_scenes(scene_count, scene_seed, canvas=canvas, **scene_kwargs)
        payload = compare_modes(scenes, config)
        payload["scenes"] = scene_count
        payload["config"] = json.loads(config.to_json())
    elif kind == "masking_schedule":
        total_epochs = int(options.get("total_epochs", 10))
        schedule = BetaSchedule(
            beta_max=float(options.get("beta_max", 0.8)), total_epochs=total_epochs
        )
        ratio = float(options.get("ratio", 0.75))
        patch_rows = int(options.get("patch_rows", 14))
        patch_cols = int(options.get("patch_cols", 14))
        seed = int(options.get("seed", 0))
        scores = np.asarray(options["scores"], dtype=np.float64)
        epochs = []
        for epoch in range(total_epochs + 1):
            beta = beta_at(schedule, epoch)
            plan = plan_mask(scores, beta=beta, seed=derive_seed(seed, epoch), ratio=ratio)
            masked = np.asarray(plan.attn_indices + plan.random_indices, dtype=np.int64)
            quantiles = np.quantile(scores[masked], [0.0, 0.25, 0.5, 0.75, 1.0])
            epochs.append(
                {
                    "epoch": epoch,
                    "beta": beta,
                    "attn_count": len(plan.attn_indices),
                    "random_count": len(plan.random_indices),
                    "masked_score_quantiles": [float(q) for q in quantiles],
                }
            )
        payload = {
            "num_patches": int(scores.size),
            "masked_total": epochs[0]["attn_count"] + epochs[0]["random_count"],
            "ratio": ratio,
            "patch_grid": [patch_rows, patch_cols],
            "epochs": epochs,
        }
    else:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    out.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out


def shard_patch_scores(shard_dir: str | Path, index: int, patch_rows: int, patch_cols: int) -> np.ndarray:
    """Patch scores for one record, fusing all its instance masks."""
    root = Path(shard_dir)
    for record in load_records(root):
        if record.index == index:
            masks = [decode_mask_png(root / inst.mask_file) for inst in record.instances]
            return patch_scores(masks, patch_rows, patch_cols)
    raise ConfigError(f"record {index} not found in shard {shard_dir}")
