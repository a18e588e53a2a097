"""attnmask: cross-attention instance masks as free supervision.

Extraction and aggregation of per-noun attention maps, a deterministic scene
oracle for verification, mask geometry, instance-level contrastive learning,
balanced masking schedules, position-aware prompts, and a reproducible
dataset pipeline with a CLI.
"""

from .attention import (
    AttentionEntry,
    AttentionStack,
    NounSpan,
    TokenAlignment,
    aggregate_maps,
    cross_attention,
    extract_instance_masks,
    normalize_map,
    select_token_maps,
)
from .backend import DiffusionHookStub, GeneratedSample, GeneratorBackend, OracleBackend
from .contrastive import (
    AugConfig,
    EncoderPair,
    MemoryBank,
    ViewPair,
    attentive_pool,
    batch_instance_loss,
    cosine_sim,
    ema_update,
    image_level_nce,
    instance_nce_loss,
    make_view_pair,
)
from .geometry import (
    BlockGrid,
    BoundingBox,
    ViewTransform,
    bbox,
    binarize,
    block_index,
    iou,
    transform_mask,
)
from .masking import BetaSchedule, MaskPlan, beta_at, patch_scores, plan_mask
from .oracle import (
    InstanceSpec,
    OracleScene,
    SceneSpec,
    generate_scene,
    random_scene_spec,
    simulate_attention,
)
from .pipeline import (
    PipelineConfig,
    ShardRecord,
    generate_dataset,
    render_overlays,
    run_experiment,
    validate_shard,
)
from .prompts import (
    PositionPrompt,
    PromptTemplate,
    Vocabulary,
    augment_prompt,
    compose_vlp_text,
    parse_position_prompt,
    position_prompt,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionEntry",
    "AttentionStack",
    "AugConfig",
    "BetaSchedule",
    "BlockGrid",
    "BoundingBox",
    "DiffusionHookStub",
    "EncoderPair",
    "GeneratedSample",
    "GeneratorBackend",
    "InstanceSpec",
    "MaskPlan",
    "MemoryBank",
    "NounSpan",
    "OracleBackend",
    "OracleScene",
    "PipelineConfig",
    "PositionPrompt",
    "PromptTemplate",
    "SceneSpec",
    "ShardRecord",
    "TokenAlignment",
    "ViewPair",
    "ViewTransform",
    "Vocabulary",
    "aggregate_maps",
    "attentive_pool",
    "augment_prompt",
    "batch_instance_loss",
    "bbox",
    "beta_at",
    "binarize",
    "block_index",
    "compose_vlp_text",
    "cosine_sim",
    "cross_attention",
    "ema_update",
    "extract_instance_masks",
    "generate_dataset",
    "generate_scene",
    "image_level_nce",
    "instance_nce_loss",
    "iou",
    "make_view_pair",
    "normalize_map",
    "parse_position_prompt",
    "patch_scores",
    "plan_mask",
    "position_prompt",
    "random_scene_spec",
    "render_overlays",
    "run_experiment",
    "select_token_maps",
    "simulate_attention",
    "transform_mask",
    "validate_shard",
]
