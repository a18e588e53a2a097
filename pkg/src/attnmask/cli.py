"""Command-line surface.

Subcommands: gen, validate, overlay, plan-masks, prompts, train-toy.
Each subcommand accepts --config JSON whose keys mirror its flags; explicit
flags override config-file values. ATTNMASK_OUTPUT_ROOT sets the default
output root; everything else is config-driven.

Exit codes: 0 success, 1 validation failure, 2 config error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import BackendError, ConfigError, PlacementError
from .masking import BetaSchedule, beta_at, plan_mask
from .pipeline import (
    PipelineConfig,
    ShardInvalid,
    generate_dataset,
    render_overlays,
    run_experiment,
    shard_patch_scores,
    validate_shard,
)
from .prompts import (
    Vocabulary,
    augment_prompt,
    default_vocabulary,
    position_prompt,
)
from .seeding import derive_seed

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3


def _output_root() -> Path:
    return Path(os.environ.get("ATTNMASK_OUTPUT_ROOT", "."))


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _merge(config_file: dict, args: argparse.Namespace, keys: list[str]) -> dict:
    """Config-file values first, then any explicitly provided flags on top."""
    merged = dict(config_file)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _cmd_gen(args: argparse.Namespace) -> int:
    keys = [
        "backend",
        "count",
        "canvas",
        "noise_level",
        "layers",
        "timesteps",
        "min_instances",
        "max_instances",
        "binarize_threshold",
        "block_rows",
        "block_cols",
        "template_id",
        "output_dir",
        "seed",
        "workers",
    ]
    merged = _merge(_load_config_file(args.config), args, keys)
    if "output_dir" not in merged:
        merged["output_dir"] = str(_output_root() / "shard")
    config = PipelineConfig.from_dict(merged)
    try:
        report = generate_dataset(config)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    print(
        f"wrote {report.written} records to {report.root} "
        f"(manifest digest {report.manifest_digest[:16]})"
    )
    if report.skipped:
        for index, message in report.skipped:
            print(f"skipped record {index}: {message}", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    report = validate_shard(args.shard)
    for violation in report.violations:
        print(f"VIOLATION: {violation}")
    print(
        f"checked {report.records_checked} records: "
        f"{'clean' if report.clean else f'{len(report.violations)} violation(s)'}"
    )
    return EXIT_OK if report.clean else EXIT_VALIDATION


def _cmd_overlay(args: argparse.Namespace) -> int:
    out_dir = args.out or str(_output_root() / "overlays")
    try:
        written = render_overlays(args.shard, out_dir)
    except ShardInvalid as exc:
        for violation in exc.report.violations:
            print(f"VIOLATION: {violation}", file=sys.stderr)
        print(f"refusing to render: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"rendered {len(written)} overlays into {out_dir}")
    return EXIT_OK


def _cmd_plan_masks(args: argparse.Namespace) -> int:
    merged = _merge(
        _load_config_file(args.config),
        args,
        ["shard", "record", "patch_rows", "patch_cols", "ratio", "beta_max",
         "total_epochs", "epoch", "seed", "out"],
    )
    patch_rows = int(merged.get("patch_rows", 14))
    patch_cols = int(merged.get("patch_cols", 14))
    seed = int(merged.get("seed", 0))
    ratio = float(merged.get("ratio", 0.75))
    schedule = BetaSchedule(
        beta_max=float(merged.get("beta_max", 0.8)),
        total_epochs=int(merged.get("total_epochs", 100)),
    )
    scores = shard_patch_scores(
        merged["shard"], int(merged.get("record", 0)), patch_rows, patch_cols
    )
    if args.sweep:
        out = merged.get("out") or str(_output_root() / "mask_schedule.json")
        run_experiment(
            "masking_schedule",
            {
                "total_epochs": schedule.total_epochs,
                "beta_max": schedule.beta_max,
                "ratio": ratio,
                "patch_rows": patch_rows,
                "patch_cols": patch_cols,
                "seed": seed,
                "scores": [float(s) for s in scores],
            },
            out,
        )
        print(f"wrote schedule sweep to {out}")
        return EXIT_OK
    epoch = float(merged.get("epoch", 0))
    beta = beta_at(schedule, epoch)
    plan = plan_mask(scores, beta=beta, seed=derive_seed(seed, int(epoch)), ratio=ratio)
    payload = plan.to_json()
    if merged.get("out"):
        Path(merged["out"]).write_text(payload + "\n", encoding="utf-8")
        print(f"wrote mask plan to {merged['out']}")
    else:
        print(payload)
    return EXIT_OK


def _cmd_prompts(args: argparse.Namespace) -> int:
    vocab = Vocabulary.from_dir(args.vocab_dir) if args.vocab_dir else default_vocabulary()
    if args.noun is not None and args.block is not None:
        print(position_prompt(args.noun, args.block).rendered)
        return EXIT_OK
    if args.class_name is None:
        raise ConfigError("prompts needs either --class-name or --noun with --block")
    print(
        augment_prompt(
            args.class_name, vocab, template_id=args.template_id, seed=args.seed
        )
    )
    return EXIT_OK


def _cmd_train_toy(args: argparse.Namespace) -> int:
    from .training import TrainConfig, make_training_scenes, toy_train

    merged = _merge(
        _load_config_file(args.config),
        args,
        ["mode", "scenes", "canvas", "epochs", "batch_size", "temperature",
         "momentum", "bank_capacity", "seed", "out",
         "min_instances", "max_instances", "min_scale", "max_scale"],
    )
    out = merged.pop("out", None) or str(_output_root() / "toy_metrics.json")
    scene_count = int(merged.pop("scenes", 200))
    canvas = int(merged.pop("canvas", 112))
    mode = merged.pop("mode", "both")
    scene_keys = ("min_instances", "max_instances", "min_scale", "max_scale")
    scene_kwargs = {k: int(merged.pop(k)) for k in scene_keys if k in merged}
    if mode == "both":
        options = dict(merged)
        options["scenes"] = scene_count
        options["canvas"] = canvas
        options.update(scene_kwargs)
        run_experiment("contrastive", options, out)
        print(f"wrote mode comparison to {out}")
        return EXIT_OK
    config_keys = set(TrainConfig.__dataclass_fields__)
    config = TrainConfig(mode=mode, **{k: v for k, v in merged.items() if k in config_keys})
    scenes = make_training_scenes(scene_count, config.seed, canvas=canvas, **scene_kwargs)
    result = toy_train(scenes, config, metrics_out=out)
    print(
        f"{mode}: probe accuracy {result.probe_accuracy:.4f} "
        f"over {result.eval_instances} held-out instances (metrics in {out})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnmask",
        description="Attention-mask dataset factory and toy experiment runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a shard of annotated samples")
    gen.add_argument("--config", help="JSON file with pipeline config fields")
    gen.add_argument("--backend", choices=["oracle", "diffusion_stub"])
    gen.add_argument("--count", type=int)
    gen.add_argument("--canvas", type=int)
    gen.add_argument("--noise-level", dest="noise_level", type=float)
    gen.add_argument("--layers", type=int)
    gen.add_argument("--timesteps", type=int)
    gen.add_argument("--min-instances", dest="min_instances", type=int)
    gen.add_argument("--max-instances", dest="max_instances", type=int)
    gen.add_argument("--threshold", dest="binarize_threshold", type=float)
    gen.add_argument("--block-rows", dest="block_rows", type=int)
    gen.add_argument("--block-cols", dest="block_cols", type=int)
    gen.add_argument("--template", dest="template_id")
    gen.add_argument("--out", dest="output_dir")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--workers", type=int)
    gen.set_defaults(func=_cmd_gen)

    val = sub.add_parser("validate", help="check a shard against its invariants")
    val.add_argument("shard")
    val.set_defaults(func=_cmd_validate)

    over = sub.add_parser("overlay", help="render mask/bbox/grid overlays")
    over.add_argument("shard")
    over.add_argument("--out")
    over.set_defaults(func=_cmd_overlay)

    plan = sub.add_parser("plan-masks", help="emit balanced mask plans for a record")
    plan.add_argument("--config")
    plan.add_argument("--shard", required=True)
    plan.add_argument("--record", type=int)
    plan.add_argument("--patch-rows", dest="patch_rows", type=int)
    plan.add_argument("--patch-cols", dest="patch_cols", type=int)
    plan.add_argument("--ratio", type=float)
    plan.add_argument("--beta-max", dest="beta_max", type=float)
    plan.add_argument("--total-epochs", dest="total_epochs", type=int)
    plan.add_argument("--epoch", type=float)
    plan.add_argument("--seed", type=int)
    plan.add_argument("--sweep", action="store_true", help="write per-epoch stats")
    plan.add_argument("--out")
    plan.set_defaults(func=_cmd_plan_masks)

    pr = sub.add_parser("prompts", help="render augmented or position prompts")
    pr.add_argument("--class-name", dest="class_name")
    pr.add_argument("--template", dest="template_id", default="class_place")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--vocab-dir", dest="vocab_dir")
    pr.add_argument("--noun")
    pr.add_argument("--block", type=int)
    pr.set_defaults(func=_cmd_prompts)

    toy = sub.add_parser("train-toy", help="run the toy contrastive experiment")
    toy.add_argument("--config")
    toy.add_argument("--mode", choices=["both", "image_level", "instance_level"])
    toy.add_argument("--scenes", type=int)
    toy.add_argument("--canvas", type=int)
    toy.add_argument("--min-instances", dest="min_instances", type=int)
    toy.add_argument("--max-instances", dest="max_instances", type=int)
    toy.add_argument("--min-scale", dest="min_scale", type=int)
    toy.add_argument("--max-scale", dest="max_scale", type=int)
    toy.add_argument("--epochs", type=int)
    toy.add_argument("--batch-size", dest="batch_size", type=int)
    toy.add_argument("--temperature", type=float)
    toy.add_argument("--momentum", type=float)
    toy.add_argument("--bank-capacity", dest="bank_capacity", type=int)
    toy.add_argument("--seed", type=int)
    toy.add_argument("--out")
    toy.set_defaults(func=_cmd_train_toy)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PlacementError as exc:
        print(
            f"config error: scene parameters are infeasible ({exc}); "
            "reduce instance count/scale or enlarge the canvas",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
