"""Desk-scale contrastive pretraining on oracle scenes.

Two arms share one small convolutional encoder and differ only in the loss
unit: `image_level` pools the whole feature grid and runs standard two-view
NT-Xent; `instance_level` pools each instance through its mask and runs the
instance NCE. Representation quality is scored by a frozen-encoder linear
probe that classifies held-out instances from mask-pooled features, so the
probe is identical for both arms.

Runs are deterministic for a fixed config: torch is pinned to one thread and
every stochastic choice derives from the config seed.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from torch import nn

from .contrastive import (
    AugConfig,
    EncoderPair,
    MemoryBank,
    attentive_pool,
    batch_instance_loss,
    ema_update,
    image_level_nce,
    make_view_pair,
)
from .errors import ConfigError, TrainingError
from .interp import block_mean
from .oracle import NOUN_STYLES, generate_scene, random_scene_spec
from .seeding import derive_seed

MODES = ("image_level", "instance_level")
NOUN_CLASSES = tuple(NOUN_STYLES)


@dataclass
class TrainConfig:
    """Toy-training knobs; JSON round-trips and rejects unknown keys."""

    mode: str = "instance_level"
    epochs: int = 24
    batch_size: int = 16
    temperature: float = 0.2
    momentum: float = 0.99
    bank_capacity: int = 0  # 0 disables the EMA key encoder + memory bank
    seed: int = 0
    crop_scale: tuple[float, float] = (0.3, 0.85)
    hflip_prob: float = 0.5
    jitter: float = 0.2
    view_size: int = 64
    lr: float = 1e-3
    probe_holdout: float = 0.4

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.bank_capacity < 0:
            raise ConfigError("bank_capacity must be >= 0")
        if not 0.0 < self.probe_holdout < 1.0:
            raise ConfigError("probe_holdout must be in (0, 1)")
        self.crop_scale = tuple(self.crop_scale)  # type: ignore[assignment]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "TrainConfig":
        data = json.loads(payload)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def aug(self) -> AugConfig:
        return AugConfig(
            crop_scale=self.crop_scale,
            hflip_prob=self.hflip_prob,
            jitter=self.jitter,
            out_h=self.view_size,
            out_w=self.view_size,
        )


@dataclass
class SceneSample:
    """One training scene: image, per-instance truth masks, class labels."""

    image: np.ndarray
    masks: dict[int, np.ndarray]
    class_ids: dict[int, int]


def make_training_scenes(
    count: int,
    seed: int,
    canvas: int = 112,
    min_instances: int = 3,
    max_instances: int = 5,
    min_scale: int = 10,
    max_scale: int = 16,
) -> list[SceneSample]:
    """Seeded multi-instance scenes labelled by noun class."""
    samples = []
    for i in range(count):
        spec = random_scene_spec(
            derive_seed(seed, i),
            canvas_h=canvas,
            canvas_w=canvas,
            min_instances=min_instances,
            max_instances=max_instances,
            min_scale=min_scale,
            max_scale=max_scale,
        )
        scene = generate_scene(spec)
        masks = {
            iid: mask.astype(np.float64)
            for iid, mask in enumerate(scene.truth_masks)
        }
        class_ids = {
            iid: NOUN_CLASSES.index(inst.noun)
            for iid, inst in enumerate(spec.instances)
        }
        samples.append(SceneSample(image=scene.image, masks=masks, class_ids=class_ids))
    return samples


class ToyEncoder(nn.Module):
    """4-block convolutional encoder; forward returns the feature grid
    (B x C x h x w) taken before any global pooling.

    Downsampling stops at 1/4 resolution so instance masks still resolve a
    few grid cells per object when pooled.
    """

    def __init__(self, width: int = 64):
        super().__init__()
        chans = [3, width // 4, width // 2, width, width]
        strides = (2, 2, 1, 1)
        blocks = []
        for i in range(4):
            blocks += [
                nn.Conv2d(chans[i], chans[i + 1], kernel_size=3, stride=strides[i], padding=1),
                nn.BatchNorm2d(chans[i + 1]),
                nn.ReLU(inplace=True),
            ]
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class ProjectionHead(nn.Module):
    """2-layer MLP on pooled features, output L2-normalized."""

    def __init__(self, in_dim: int = 64, out_dim: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, in_dim), nn.ReLU(inplace=True), nn.Linear(in_dim, out_dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.net(x)
        return z / torch.linalg.vector_norm(z, dim=-1, keepdim=True).clamp_min(1e-12)


@dataclass
class ToyTrainResult:
    mode: str
    epoch_losses: list[float]
    probe_accuracy: float
    encoder: ToyEncoder
    projection: ProjectionHead
    train_scenes: int = 0
    eval_scenes: int = 0
    eval_instances: int = 0


def _to_batch(images: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack(images, axis=0).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _grid_mask(mask: np.ndarray, gh: int, gw: int) -> np.ndarray:
    return block_mean(mask, gh, gw)


def _pool_instances(
    grid: torch.Tensor, masks: dict[int, np.ndarray], wanted: tuple[int, ...]
) -> tuple[list[int], list[torch.Tensor]]:
    """Mask-pooled features for each wanted instance with mass on the grid."""
    gh, gw = grid.shape[1], grid.shape[2]
    feats = []
    kept = []
    zhwc = grid.permute(1, 2, 0)
    for iid in wanted:
        down = _grid_mask(masks[iid], gh, gw)
        if down.sum() <= 0:
            continue
        feats.append(attentive_pool(zhwc, down))
        kept.append(iid)
    return kept, feats


def _split(scenes: list[SceneSample], holdout: float) -> tuple[list[SceneSample], list[SceneSample]]:
    n_eval = max(1, int(round(len(scenes) * holdout)))
    n_eval = min(n_eval, len(scenes) - 1) if len(scenes) > 1 else 1
    return scenes[: len(scenes) - n_eval], scenes[len(scenes) - n_eval :]


@torch.no_grad()
def _probe_features(
    encoder: ToyEncoder, scenes: list[SceneSample]
) -> tuple[np.ndarray, np.ndarray]:
    encoder.eval()
    xs, ys = [], []
    for scene in scenes:
        img = scene.image.astype(np.float32) / 255.0
        grid = encoder(_to_batch([img]))[0]
        kept, feats = _pool_instances(grid, scene.masks, tuple(scene.masks))
        for iid, feat in zip(kept, feats):
            xs.append(feat.numpy())
            ys.append(scene.class_ids[iid])
    return np.stack(xs, axis=0), np.asarray(ys)


def linear_probe(
    encoder: ToyEncoder, train: list[SceneSample], eval_: list[SceneSample]
) -> float:
    """Frozen-encoder instance classification accuracy on held-out scenes."""
    x_tr, y_tr = _probe_features(encoder, train)
    x_ev, y_ev = _probe_features(encoder, eval_)
    clf = LogisticRegression(max_iter=2000)
    clf.fit(x_tr, y_tr)
    return float(clf.score(x_ev, y_ev))


def _emit(stream, payload: dict) -> None:
    if stream is None:
        return
    stream.write(json.dumps(payload, sort_keys=True) + "\n")


def toy_train(
    scenes: list[SceneSample],
    config: TrainConfig,
    metrics_out: io.TextIOBase | str | Path | None = None,
) -> ToyTrainResult:
    """Train the toy encoder with the configured loss and probe it.

    Emits one JSON object per epoch (plus a final probe record) on
    metrics_out when given. Raises TrainingError with the epoch index if the
    loss goes non-finite.
    """
    if not scenes:
        raise ConfigError("dataset must be nonempty")
    close_stream = False
    stream = None
    if metrics_out is not None:
        if isinstance(metrics_out, (str, Path)):
            stream = open(metrics_out, "w", encoding="utf-8")
            close_stream = True
        else:
            stream = metrics_out
    try:
        torch.set_num_threads(1)
        torch.manual_seed(config.seed)
        encoder = ToyEncoder()
        projection = ProjectionHead(encoder.out_channels)
        params = list(encoder.parameters()) + list(projection.parameters())
        optimizer = torch.optim.Adam(params, lr=config.lr)
        use_bank = config.bank_capacity > 0 and config.mode == "instance_level"
        bank = None
        pair = None
        key_proj = None
        if use_bank:
            key_encoder = ToyEncoder()
            key_encoder.load_state_dict(encoder.state_dict())
            key_proj = ProjectionHead(encoder.out_channels)
            key_proj.load_state_dict(projection.state_dict())
            for p in list(key_encoder.parameters()) + list(key_proj.parameters()):
                p.requires_grad_(False)
            pair = EncoderPair(query=encoder, key=key_encoder, momentum=config.momentum)
            proj_pair = EncoderPair(query=projection, key=key_proj, momentum=config.momentum)
            bank = MemoryBank(config.bank_capacity, dim=32)
        train_scenes, eval_scenes = _split(scenes, config.probe_holdout)
        aug = config.aug()
        decay_epoch = max(1, int(round(0.75 * config.epochs)))
        epoch_losses: list[float] = []
        for epoch in range(config.epochs):
            if epoch == decay_epoch:
                for group in optimizer.param_groups:
                    group["lr"] = config.lr * 0.1
            encoder.train()
            projection.train()
            order = np.random.default_rng(derive_seed(config.seed, 1000 + epoch)).permutation(
                len(train_scenes)
            )
            losses = []
            for start in range(0, len(order), config.batch_size):
                batch_idx = order[start : start + config.batch_size]
                if len(batch_idx) < 2:
                    continue
                pairs = [
                    make_view_pair(
                        train_scenes[i].image,
                        train_scenes[i].masks,
                        aug,
                        derive_seed(config.seed, epoch, int(i)),
                    )
                    for i in batch_idx
                ]
                xa = _to_batch([p.view_a.image for p in pairs])
                xb = _to_batch([p.view_b.image for p in pairs])
                grids_a = encoder(xa)
                if use_bank:
                    with torch.no_grad():
                        grids_b = pair.key(xb)
                else:
                    grids_b = encoder(xb)
                if config.mode == "image_level":
                    za = projection(grids_a.mean(dim=(2, 3)))
                    zb = projection(grids_b.mean(dim=(2, 3)))
                    loss = image_level_nce(za, zb, config.temperature)
                else:
                    pooled_a, pooled_b, tags = [], [], []
                    for b, vp in enumerate(pairs):
                        kept_a, feats_a = _pool_instances(
                            grids_a[b], vp.view_a.masks, vp.shared_instances
                        )
                        kept_b, feats_b = _pool_instances(
                            grids_b[b], vp.view_b.masks, vp.shared_instances
                        )
                        common = [iid for iid in kept_a if iid in set(kept_b)]
                        fa = dict(zip(kept_a, feats_a))
                        fb = dict(zip(kept_b, feats_b))
                        for iid in common:
                            pooled_a.append(fa[iid])
                            pooled_b.append(fb[iid])
                            tags.append(int(batch_idx[b]) * 16 + iid)
                    if not pooled_a:
                        continue
                    za = projection(torch.stack(pooled_a))
                    if use_bank:
                        with torch.no_grad():
                            zb = key_proj(torch.stack(pooled_b))
                    else:
                        zb = projection(torch.stack(pooled_b))
                    loss = batch_instance_loss(
                        za, zb, temperature=config.temperature, negatives="union", bank=bank
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                if use_bank:
                    ema_update(pair)
                    ema_update(proj_pair)
                    bank.push(zb.detach(), tags)
                value = float(loss.detach())
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                losses.append(value)
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            if losses and not np.isfinite(mean_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            epoch_losses.append(mean_loss)
            _emit(stream, {"epoch": epoch, "mode": config.mode, "loss": mean_loss})
        probe_acc = linear_probe(encoder, train_scenes, eval_scenes)
        eval_instances = sum(len(s.masks) for s in eval_scenes)
        _emit(
            stream,
            {
                "mode": config.mode,
                "probe_accuracy": probe_acc,
                "eval_scenes": len(eval_scenes),
                "eval_instances": eval_instances,
            },
        )
        return ToyTrainResult(
            mode=config.mode,
            epoch_losses=epoch_losses,
            probe_accuracy=probe_acc,
            encoder=encoder,
            projection=projection,
            train_scenes=len(train_scenes),
            eval_scenes=len(eval_scenes),
            eval_instances=eval_instances,
        )
    finally:
        if close_stream and stream is not None:
            stream.close()


def compare_modes(
    scenes: list[SceneSample], config: TrainConfig
) -> dict:
    """Run both arms with identical settings; report probe accuracies."""
    results = {}
    for mode in MODES:
        cfg = TrainConfig(**{**json.loads(config.to_json()), "mode": mode})
        results[mode] = toy_train(scenes, cfg)
    return {
        "image_level": {
            "probe_accuracy": results["image_level"].probe_accuracy,
            "epoch_losses": results["image_level"].epoch_losses,
        },
        "instance_level": {
            "probe_accuracy": results["instance_level"].probe_accuracy,
            "epoch_losses": results["instance_level"].epoch_losses,
        },
        "margin_points": 100.0
        * (
            results["instance_level"].probe_accuracy
            - results["image_level"].probe_accuracy
        ),
    }
