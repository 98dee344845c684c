# schemas.py

import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

MAX_ACCELERATION_MPS2 = 5.0
MAX_STEERING_RAD = 0.5

LidarEncoding = Literal["PP", "RV"]
ImagePath = Literal["BEV", "WOB"]
FusionMode = Literal["AVG", "FC", "TR"]
LatentMode = Literal["1D", "2D"]
PretrainMode = Literal["NPT", "PTF", "PTO"]
Split = Literal["train", "val_rl", "val_ds"]

Vec2 = tuple[float, float]
Vec3 = tuple[float, float, float]


class Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ============================================================================
# World
# ============================================================================


class Box(Frozen):
    """Axis-aligned obstacle in world coordinates (meters)."""

    center_m: Vec3
    size_m: Vec3
    albedo_rgb: Vec3

    @field_validator("size_m")
    @classmethod
    def positive_size(cls, v: Vec3) -> Vec3:
        if min(v) <= 0:
            raise ValueError(f"box size must be strictly positive, got {v}")
        return v

    @field_validator("albedo_rgb")
    @classmethod
    def unit_albedo(cls, v: Vec3) -> Vec3:
        if min(v) < 0 or max(v) > 1:
            raise ValueError(f"albedo must lie in [0, 1], got {v}")
        return v

    @property
    def lower(self) -> Vec3:
        return tuple(c - s / 2 for c, s in zip(self.center_m, self.size_m))

    @property
    def upper(self) -> Vec3:
        return tuple(c + s / 2 for c, s in zip(self.center_m, self.size_m))


class WorldSpec(Frozen):
    seed: int
    extent_m: float = Field(gt=0)
    obstacles: list[Box] = []
    road_waypoints: list[Vec2]

    @field_validator("road_waypoints")
    @classmethod
    def enough_waypoints(cls, v: list[Vec2]) -> list[Vec2]:
        if len(v) < 4:
            raise ValueError(f"road needs at least 4 waypoints, got {len(v)}")
        return v

    @model_validator(mode="after")
    def obstacles_inside(self) -> "WorldSpec":
        for box in self.obstacles:
            lo, hi = box.lower, box.upper
            if min(lo[0], lo[1]) < -self.extent_m or max(hi[0], hi[1]) > self.extent_m:
                raise ValueError(f"obstacle at {box.center_m} leaves the ground plane")
        return self


class EgoState(Frozen):
    position_m: Vec2 = (0.0, 0.0)
    heading_rad: float = 0.0
    speed_mps: float = 0.0

    @field_validator("speed_mps")
    @classmethod
    def non_negative_speed(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"speed must be >= 0, got {v}")
        return v

    @field_validator("heading_rad")
    @classmethod
    def wrapped_heading(cls, v: float) -> float:
        if not (-math.pi < v <= math.pi):
            raise ValueError(f"heading must lie in (-pi, pi], got {v}")
        return v


class Action(Frozen):
    acceleration_mps2: float = 0.0
    steering_rad: float = 0.0

    @field_validator("acceleration_mps2")
    @classmethod
    def bounded_acceleration(cls, v: float) -> float:
        if abs(v) > MAX_ACCELERATION_MPS2:
            raise ValueError(f"|acceleration| must be <= {MAX_ACCELERATION_MPS2}, got {v}")
        return v

    @field_validator("steering_rad")
    @classmethod
    def bounded_steering(cls, v: float) -> float:
        if abs(v) > MAX_STEERING_RAD:
            raise ValueError(f"|steering| must be <= {MAX_STEERING_RAD}, got {v}")
        return v

    @classmethod
    def clamped(cls, acceleration_mps2: float, steering_rad: float) -> "Action":
        return cls(
            acceleration_mps2=min(max(acceleration_mps2, -MAX_ACCELERATION_MPS2), MAX_ACCELERATION_MPS2),
            steering_rad=min(max(steering_rad, -MAX_STEERING_RAD), MAX_STEERING_RAD),
        )


# ============================================================================
# Sensors and grids
# ============================================================================


class CameraSpec(Frozen):
    """
    Pinhole camera mounted on the ego vehicle.

    Pixel (row, col) has image coordinates (u=col, v=row); the principal point
    defaults to (width/2, height/2), so the optical axis passes through pixel
    (height/2, width/2). Camera looks along ego +x; `pitch_rad` > 0 tilts it down.
    """

    width: int = Field(160, ge=1)
    height: int = Field(96, ge=1)
    fx: float = Field(80.0, gt=0)
    fy: float = Field(80.0, gt=0)
    cx: float | None = None
    cy: float | None = None
    position_m: Vec3 = (0.0, 0.0, 1.6)
    pitch_rad: float = 0.0

    @property
    def principal(self) -> Vec2:
        cx = self.width / 2 if self.cx is None else self.cx
        cy = self.height / 2 if self.cy is None else self.cy
        return cx, cy

    def scaled(self, stride: int) -> "CameraSpec":
        """Intrinsics of a feature map sampled every `stride` pixels."""
        cx, cy = self.principal
        return self.model_copy(
            update={
                "width": self.width // stride,
                "height": self.height // stride,
                "fx": self.fx / stride,
                "fy": self.fy / stride,
                "cx": cx / stride,
                "cy": cy / stride,
            }
        )


class LidarSpec(Frozen):
    rings: int = Field(16, ge=1)
    azimuths: int = Field(128, ge=2)
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 5.0
    max_range_m: float = Field(50.0, gt=0)
    position_m: Vec3 = (0.0, 0.0, 1.8)

    @model_validator(mode="after")
    def ordered_span(self) -> "LidarSpec":
        if self.elevation_max_deg < self.elevation_min_deg:
            raise ValueError("elevation_max_deg must be >= elevation_min_deg")
        return self


class VoxelGridSpec(Frozen):
    dims: tuple[int, int, int] = (48, 48, 16)
    resolution_m: float = Field(0.5, gt=0)
    origin_m: Vec3 = (-12.0, -12.0, -2.0)

    @field_validator("dims")
    @classmethod
    def positive_dims(cls, v: tuple[int, int, int]) -> tuple[int, int, int]:
        if min(v) < 1:
            raise ValueError(f"grid dims must be >= 1, got {v}")
        return v

    @classmethod
    def ego_centered(cls, dims: tuple[int, int, int], resolution_m: float, z_min_m: float = -2.0) -> "VoxelGridSpec":
        return cls(
            dims=dims,
            resolution_m=resolution_m,
            origin_m=(-dims[0] * resolution_m / 2, -dims[1] * resolution_m / 2, z_min_m),
        )


class BevGridSpec(Frozen):
    """Ego X/Y grid used by the pillar encoder and the image lift."""

    dims: tuple[int, int] = (48, 48)
    resolution_m: float = Field(1.0, gt=0)
    origin_m: Vec2 = (-24.0, -24.0)

    @field_validator("dims")
    @classmethod
    def positive_dims(cls, v: tuple[int, int]) -> tuple[int, int]:
        if min(v) < 1:
            raise ValueError(f"grid dims must be >= 1, got {v}")
        return v


# ============================================================================
# Model configuration
# ============================================================================


class BackboneConfig(Frozen):
    in_channels: int = 3
    stage_channels: list[int] = [16, 32, 64]
    fused_channels: int = 64
    out_stride: int = 8

    @field_validator("stage_channels")
    @classmethod
    def at_least_two_stages(cls, v: list[int]) -> list[int]:
        if len(v) < 2:
            raise ValueError("backbone needs at least 2 stages")
        return v

    @property
    def stage_strides(self) -> list[int]:
        return [2 ** (i + 2) for i in range(len(self.stage_channels))]

    @model_validator(mode="after")
    def stride_is_a_stage(self) -> "BackboneConfig":
        if self.out_stride not in self.stage_strides:
            raise ValueError(f"out_stride {self.out_stride} must be one of {self.stage_strides}")
        return self


class FusionConfig(Frozen):
    mode: FusionMode = "TR"
    layers: int = Field(2, ge=0)
    heads: int = Field(4, ge=1)
    channels: int = 64
    sensors: int = Field(2, ge=1)
    latent_dim: int = 128
    mlp_ratio: int = 4

    @model_validator(mode="after")
    def heads_divide_channels(self) -> "FusionConfig":
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.channels % 4:
            raise ValueError(f"channels {self.channels} not divisible by 4 (positional embedding)")
        return self


class DynamicsConfig(Frozen):
    stoch_dim: int = 64
    deter_dim: int = 128
    token_channels: int = 64
    action_dim: int = 16
    hidden_dim: int = 256
    heads: int = 4
    sigma_min: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def heads_divide_tokens(self) -> "DynamicsConfig":
        if self.token_channels % self.heads:
            raise ValueError(f"token_channels {self.token_channels} not divisible by heads {self.heads}")
        return self


class DecoderConfig(Frozen):
    channels: int = 64
    min_channels: int = 16
    voxel_channels: int = 16
    range_scale_m: float = 10.0
    empty_range_m: float = 0.05


class ModelConfig(Frozen):
    image_backbone: BackboneConfig = BackboneConfig(in_channels=3, out_stride=8)
    range_backbone: BackboneConfig = BackboneConfig(in_channels=4, out_stride=4)
    pillar_backbone: BackboneConfig = BackboneConfig(in_channels=32, out_stride=4)
    bev_backbone: BackboneConfig = BackboneConfig(in_channels=64, out_stride=4)
    pillar_grid: BevGridSpec = BevGridSpec()
    pillar_channels: int = 32
    bev_grid: BevGridSpec = BevGridSpec(dims=(64, 64), resolution_m=0.8, origin_m=(0.0, -25.6))
    depth_bins: int = Field(32, ge=1)
    depth_min_m: float = 1.0
    depth_max_m: float = 50.0
    fusion: FusionConfig = FusionConfig()
    dynamics: DynamicsConfig = DynamicsConfig()
    decoder: DecoderConfig = DecoderConfig()


class LossWeights(Frozen):
    img: float = Field(1.0, ge=0)
    pcd: float = Field(1.0, ge=0)
    voxel: float = Field(1.0, ge=0)
    kl: float = Field(0.1, ge=0)
    scales: tuple[float, float, float] = (1.0, 0.5, 0.25)

    @field_validator("scales")
    @classmethod
    def non_negative_scales(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if min(v) < 0:
            raise ValueError(f"scale weights must be >= 0, got {v}")
        return v


# ============================================================================
# Data generation configuration
# ============================================================================


class DomainShift(Frozen):
    tint_rgb: Vec3 = (0.75, 0.8, 0.95)
    noise_sigma: float = 0.03
    lidar_dropout: float = 0.01


class WorldConfig(Frozen):
    n_obstacles: int = Field(12, ge=0)
    extent_m: float = 60.0
    road_radius_m: float = 28.0
    corridor_half_width_m: float = 4.0
    dt_s: float = Field(0.2, gt=0)
    wheelbase_m: float = 2.5
    target_speed_mps: float = 6.0
    spawn_speed_mps: float = 4.0
    lookahead_m: float = 6.0
    sky_rgb: Vec3 = (0.55, 0.7, 0.9)
    ground_rgb: Vec3 = (0.35, 0.45, 0.25)
    road_rgb: Vec3 = (0.25, 0.25, 0.27)
    road_half_width_m: float = 3.0
    route_cells: int = 64
    route_resolution_m: float = 0.5


class DatasetConfig(Frozen):
    train_episodes: int = Field(16, ge=0)
    val_rl_episodes: int = Field(4, ge=0)
    val_ds_episodes: int = Field(4, ge=0)
    frames: int = Field(60, ge=1)
    base_seed: int = 0
    workers: int = Field(4, ge=1)
    domain_shift: DomainShift = DomainShift()


# ============================================================================
# Experiment
# ============================================================================


class ExperimentConfig(Frozen):
    variant_tag: str = "RV-WOB-TR"
    latent_mode: LatentMode = "2D"
    occupancy_head: bool = True
    pretrain_mode: PretrainMode = "NPT"
    checkpoint_path: str | None = None
    seq_len: int = Field(6, ge=1)
    observed_m: int = Field(4, ge=1)
    future_n: int = Field(2, ge=0)
    batch: int = Field(4, ge=1)
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    seeds: list[int] = [0]
    steps: int = Field(2000, ge=0)
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(1, ge=1)
    window_stride: int = Field(1, ge=1)

    camera: CameraSpec = CameraSpec()
    lidar: LidarSpec = LidarSpec()
    grid: VoxelGridSpec = VoxelGridSpec()
    world: WorldConfig = WorldConfig()
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    weights: LossWeights = LossWeights()

    @field_validator("variant_tag")
    @classmethod
    def valid_tag(cls, v: str) -> str:
        parts = v.split("-")
        if len(parts) != 3 or parts[0] not in ("PP", "RV") or parts[1] not in ("BEV", "WOB") or parts[2] not in (
            "AVG",
            "FC",
            "TR",
        ):
            raise ValueError(f"variant tag must be A-B-C with A in PP/RV, B in BEV/WOB, C in AVG/FC/TR; got {v!r}")
        return v

    @field_validator("seeds")
    @classmethod
    def some_seed(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @model_validator(mode="after")
    def consistent_protocol(self) -> "ExperimentConfig":
        if self.observed_m + self.future_n != self.seq_len:
            raise ValueError(
                f"observed_m + future_n must equal seq_len ({self.observed_m} + {self.future_n} != {self.seq_len})"
            )
        if self.pretrain_mode in ("PTF", "PTO") and not self.checkpoint_path:
            raise ValueError(f"pretrain_mode {self.pretrain_mode} requires checkpoint_path")
        return self

    @property
    def lidar_encoding(self) -> LidarEncoding:
        return self.variant_tag.split("-")[0]  # type: ignore[return-value]

    @property
    def image_path(self) -> ImagePath:
        return self.variant_tag.split("-")[1]  # type: ignore[return-value]

    @property
    def fusion_mode(self) -> FusionMode:
        return self.variant_tag.split("-")[2]  # type: ignore[return-value]

    @property
    def seed(self) -> int:
        return self.seeds[0]


# ============================================================================
# Persistence records
# ============================================================================


class FrameMeta(Frozen):
    index: int
    timestamp_s: float
    ego: EgoState
    action: Action
    n_points: int


class EpisodeMeta(Frozen):
    episode: int
    split: Split
    seed: int
    domain_shift: bool
    config_hash: str
    world: WorldSpec
    camera: CameraSpec
    lidar: LidarSpec
    frames: list[FrameMeta]


class ManifestEntry(Frozen):
    split: Split
    episode: int
    seed: int
    path: str
    frames: int


class DatasetManifest(Frozen):
    config_hash: str
    entries: list[ManifestEntry] = []

    def split(self, name: Split) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


class MetricRecord(Frozen):
    step: int
    split: str
    term: str
    value: float
