import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from schemas import (
    BackboneConfig,
    BevGridSpec,
    CameraSpec,
    DatasetConfig,
    DecoderConfig,
    DynamicsConfig,
    ExperimentConfig,
    FusionConfig,
    LidarSpec,
    ModelConfig,
    VoxelGridSpec,
    WorldConfig,
)

load_dotenv()

logger = logging.getLogger(__name__)

# ============================================================================
# Constants
# ============================================================================

SEED_ENV = "MUVO_SEED"
LOG_LEVEL_ENV = "MUVO_LOG_LEVEL"

# Ratios at which every modality is reconstructed and scored
SCALES = (1, 2, 4)

# PSNR for a perfect reconstruction
PSNR_CAP_DB = 99.0

# Probability clamp for occupancy losses
PROB_EPS = 1e-6

LIDAR_VARIANTS = ("PP", "RV")
IMAGE_VARIANTS = ("BEV", "WOB")
FUSION_VARIANTS = ("AVG", "FC", "TR")

ALL_VARIANTS = tuple(f"{a}-{b}-{c}" for a in LIDAR_VARIANTS for b in IMAGE_VARIANTS for c in FUSION_VARIANTS)

# Eight-cell subset for the short fusion comparison (best-effort choice).
CORE_VARIANTS = (
    "PP-WOB-AVG",
    "PP-WOB-FC",
    "PP-WOB-TR",
    "PP-BEV-TR",
    "RV-WOB-AVG",
    "RV-WOB-FC",
    "RV-WOB-TR",
    "RV-BEV-TR",
)

# Fields that do not change the network and may differ between a pre-training
# run and the PTF/PTO run that loads it.
NON_ARCHITECTURE_FIELDS = {
    "occupancy_head",
    "pretrain_mode",
    "checkpoint_path",
    "seq_len",
    "observed_m",
    "future_n",
    "batch",
    "lr",
    "weight_decay",
    "seeds",
    "steps",
    "checkpoint_every",
    "log_every",
    "window_stride",
    "dataset",
    "world",
    "weights",
}


# ============================================================================
# Presets
# ============================================================================

DESK_PRESET = ExperimentConfig()

FULL_PRESET = ExperimentConfig(
    seq_len=12,
    observed_m=8,
    future_n=4,
    batch=16,
    steps=50_000,
    checkpoint_every=5_000,
    log_every=10,
    camera=CameraSpec(width=960, height=600, fx=480.0, fy=480.0),
    lidar=LidarSpec(rings=64, azimuths=1024, elevation_min_deg=-25.0, elevation_max_deg=15.0, max_range_m=85.0),
    grid=VoxelGridSpec.ego_centered((192, 192, 64), 0.5, z_min_m=-8.0),
    world=WorldConfig(extent_m=120.0, road_radius_m=60.0),
    dataset=DatasetConfig(train_episodes=100, val_rl_episodes=20, val_ds_episodes=20, frames=1500),
    model=ModelConfig(
        image_backbone=BackboneConfig(in_channels=3, stage_channels=[64, 128, 256], fused_channels=256, out_stride=8),
        range_backbone=BackboneConfig(in_channels=4, stage_channels=[64, 128, 256], fused_channels=256, out_stride=4),
        pillar_backbone=BackboneConfig(in_channels=64, stage_channels=[64, 128, 256], fused_channels=256, out_stride=4),
        bev_backbone=BackboneConfig(in_channels=256, stage_channels=[64, 128, 256], fused_channels=256, out_stride=4),
        pillar_grid=BevGridSpec(dims=(192, 192), resolution_m=0.5, origin_m=(-48.0, -48.0)),
        pillar_channels=64,
        bev_grid=BevGridSpec(dims=(192, 192), resolution_m=0.5, origin_m=(0.0, -48.0)),
        depth_bins=64,
        depth_max_m=85.0,
        fusion=FusionConfig(channels=256, heads=8, layers=4, latent_dim=512),
        dynamics=DynamicsConfig(stoch_dim=512, deter_dim=1024, token_channels=256, action_dim=64, hidden_dim=1024, heads=8),
        decoder=DecoderConfig(channels=256, min_channels=32, voxel_channels=32),
    ),
)

# Test scale: every shape contract still holds, forward passes take milliseconds.
TINY_PRESET = ExperimentConfig(
    seq_len=3,
    observed_m=2,
    future_n=1,
    batch=2,
    steps=2,
    checkpoint_every=1,
    camera=CameraSpec(width=64, height=32, fx=32.0, fy=32.0),
    lidar=LidarSpec(rings=8, azimuths=32),
    grid=VoxelGridSpec.ego_centered((16, 16, 8), 1.0, z_min_m=-2.0),
    world=WorldConfig(n_obstacles=4, extent_m=40.0, road_radius_m=18.0, route_cells=16, route_resolution_m=2.0),
    dataset=DatasetConfig(train_episodes=2, val_rl_episodes=1, val_ds_episodes=1, frames=6, workers=2),
    model=ModelConfig(
        image_backbone=BackboneConfig(in_channels=3, stage_channels=[4, 8, 8], fused_channels=16, out_stride=8),
        range_backbone=BackboneConfig(in_channels=4, stage_channels=[4, 8], fused_channels=16, out_stride=4),
        pillar_backbone=BackboneConfig(in_channels=8, stage_channels=[4, 8], fused_channels=16, out_stride=4),
        bev_backbone=BackboneConfig(in_channels=16, stage_channels=[4, 8], fused_channels=16, out_stride=4),
        pillar_grid=BevGridSpec(dims=(16, 16), resolution_m=2.0, origin_m=(-16.0, -16.0)),
        pillar_channels=8,
        bev_grid=BevGridSpec(dims=(16, 16), resolution_m=2.0, origin_m=(0.0, -16.0)),
        depth_bins=8,
        depth_max_m=30.0,
        fusion=FusionConfig(channels=16, heads=2, layers=1, latent_dim=16),
        dynamics=DynamicsConfig(stoch_dim=8, deter_dim=16, token_channels=8, action_dim=4, hidden_dim=16, heads=2),
        decoder=DecoderConfig(channels=8, min_channels=4, voxel_channels=4),
    ),
)

PRESETS: dict[str, ExperimentConfig] = {"desk": DESK_PRESET, "full": FULL_PRESET, "tiny": TINY_PRESET}


# ============================================================================
# Key-value config files
# ============================================================================


def _flatten(tree: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _assign(tree: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for part in parents:
        child = node.get(part)
        if not isinstance(child, dict):
            raise KeyError(f"unknown config section {dotted!r}")
        node = child
    if leaf not in node:
        raise KeyError(f"unknown config key {dotted!r}")
    node[leaf] = value


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(text: str) -> dict[str, Any]:
    """`dotted.key = value` lines; `#` starts a comment; values are JSON or bare strings."""
    overrides: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        overrides[key.strip()] = _parse_value(raw)
    return overrides


def apply_overrides(base: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    tree = base.model_dump(mode="json")
    for dotted, value in overrides.items():
        _assign(tree, dotted, value)
    return ExperimentConfig.model_validate(tree)


def apply_env(cfg: ExperimentConfig) -> ExperimentConfig:
    """MUVO_SEED replaces the training seeds and the dataset base seed."""
    raw = os.getenv(SEED_ENV)
    if raw is None or not raw.strip():
        return cfg
    seed = int(raw)
    logger.info("seed override from env | %s=%d", SEED_ENV, seed)
    dataset = cfg.dataset.model_copy(update={"base_seed": seed})
    return cfg.model_copy(update={"seeds": [seed], "dataset": dataset})



def load_config(
    path: str | Path | None = None,
    preset: str = "desk",
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    merged: dict[str, Any] = {}
    if path is not None:
        merged.update(parse_overrides(Path(path).read_text(encoding="utf-8")))
    merged.update(overrides or {})
    cfg = apply_overrides(PRESETS[preset], merged) if merged else PRESETS[preset]
    return apply_env(cfg)


# ============================================================================
# Canonical form and hashes
# ============================================================================


def canonical_form(cfg: ExperimentConfig, exclude: set[str] | None = None) -> str:
    tree = cfg.model_dump(mode="json", exclude=exclude)
    flat = _flatten(tree)
    return "\n".join(f"{key} = {json.dumps(flat[key], sort_keys=True)}" for key in sorted(flat)) + "\n"


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def config_hash(cfg: ExperimentConfig) -> str:
    return _digest(canonical_form(cfg))


def model_hash(cfg: ExperimentConfig) -> str:
    return _digest(canonical_form(cfg, exclude=NON_ARCHITECTURE_FIELDS))


def data_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that shapes generated episodes."""
    return _digest(canonical_form(cfg, exclude=set(ExperimentConfig.model_fields) - {"camera", "lidar", "world", "dataset"}))
