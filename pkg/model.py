"""
One world-model variant: A-B-C encoders + fusion, the transition model and
the decoders, wired for a given latent mode and occupancy-head setting.
"""

import logging
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from dataset import Batch
from decoders import DecoderOutput, WorldDecoder, decoder_layout
from dynamics import Dynamics, LatentState, NoiseMode, Rollout
from encoders import Backbone, FeatureMap, ImageEncoder, LiftToBEV, PillarEncoder, RangeViewEncoder, range_view_to_points
from fusion import Fusion
from schemas import ExperimentConfig

logger = logging.getLogger(__name__)

VOXEL_PREFIXES = ("decoder.voxel_seed.", "decoder.voxel.")


@dataclass
class WorldModelOutput:
    rollout: Rollout
    decoded: DecoderOutput  # leading axis B·L, time-minor
    batch_size: int
    length: int


def check_widths(cfg: ExperimentConfig) -> None:
    m = cfg.model
    c = m.fusion.channels
    encoders = {"image": m.image_backbone, "bev": m.bev_backbone, "range": m.range_backbone, "pillar": m.pillar_backbone}
    for name, bb in encoders.items():
        if bb.fused_channels != c:
            raise ValueError(f"{name} backbone emits {bb.fused_channels} channels, fusion expects {c}")
    if m.bev_backbone.in_channels != m.image_backbone.fused_channels:
        raise ValueError("bev backbone input must match image backbone output channels")
    if m.pillar_backbone.in_channels != m.pillar_channels:
        raise ValueError("pillar backbone input must match pillar_channels")


class WorldModel(nn.Module):
    def __init__(self, cfg: ExperimentConfig) -> None:
        super().__init__()
        check_widths(cfg)
        self.cfg = cfg
        m = cfg.model

        self.image_encoder = ImageEncoder(m.image_backbone)
        self.lift: LiftToBEV | None = None
        if cfg.image_path == "BEV":
            self.lift = LiftToBEV(
                cfg.camera,
                m.image_backbone.out_stride,
                m.bev_grid,
                m.image_backbone.fused_channels,
                m.depth_bins,
                m.depth_min_m,
                m.depth_max_m,
            )
            self.bev_backbone = Backbone(m.bev_backbone)

        if cfg.lidar_encoding == "RV":
            self.lidar_encoder: RangeViewEncoder | PillarEncoder = RangeViewEncoder(m.range_backbone, cfg.lidar.max_range_m)
        else:
            self.lidar_encoder = PillarEncoder(m.pillar_grid, m.pillar_channels, m.pillar_backbone, cfg.lidar.max_range_m)

        self.fusion = Fusion(m.fusion.model_copy(update={"mode": cfg.fusion_mode, "sensors": 2}), cfg.latent_mode)
        self.layout = decoder_layout(cfg.camera, cfg.lidar)
        self.dynamics = Dynamics(m.dynamics, cfg.latent_mode, self.fusion.out_channels, self.layout.total)
        self.decoder = WorldDecoder(
            m.decoder,
            cfg.latent_mode,
            self.layout,
            self.dynamics.state_channels,
            cfg.camera,
            cfg.lidar,
            cfg.grid if cfg.occupancy_head else None,
        )
        logger.info(
            "model built | variant=%s latent=%s occupancy=%s | params=%d",
            cfg.variant_tag,
            cfg.latent_mode,
            cfg.occupancy_head,
            sum(p.numel() for p in self.parameters()),
        )

    def encode(self, rgb: Tensor, range_view: Tensor) -> list[FeatureMap]:
        """Per-sensor feature maps [camera, lidar] for a flat batch of frames."""
        camera = self.image_encoder(rgb)
        if self.lift is not None:
            lifted = self.lift(camera)
            camera = FeatureMap(self.bev_backbone(lifted.values), self.bev_backbone.cfg.out_stride, "camera")

        if isinstance(self.lidar_encoder, RangeViewEncoder):
            lidar = self.lidar_encoder(range_view)
        else:
            lidar = self.lidar_encoder(*range_view_to_points(range_view))
        return [camera, lidar]

    def observe(self, rgb: Tensor, range_view: Tensor) -> list[Tensor]:
        """B×L frames → L observations o_t."""
        b, length = rgb.shape[:2]
        obs = self.fusion(self.encode(rgb.flatten(0, 1), range_view.flatten(0, 1)))
        return list(obs.unflatten(0, (b, length)).unbind(1))

    def decode(self, states: list[LatentState]) -> DecoderOutput:
        s = torch.stack([st.s for st in states], dim=1).flatten(0, 1)
        h = torch.stack([st.h for st in states], dim=1).flatten(0, 1)
        return self.decoder(LatentState(s, h))

    def forward(
        self,
        batch: Batch,
        observed_m: int | None = None,
        noise: NoiseMode = "sample",
        generator: torch.Generator | None = None,
    ) -> WorldModelOutput:
        """Observe the first `observed_m` frames (all by default), imagine the rest."""
        b, length = batch.rgb.shape[:2]
        m = length if observed_m is None else observed_m
        if not 1 <= m <= length:
            raise ValueError(f"observed frames must lie in [1, {length}], got {m}")

        observations = self.observe(batch.rgb[:, :m], batch.range_view[:, :m])
        rollout = self.dynamics.rollout(observations, batch.actions, length - m, noise=noise, generator=generator)
        return WorldModelOutput(rollout, self.decode(rollout.states), b, length)

    def voxel_parameter_names(self) -> set[str]:
        return {name for name, _ in self.named_parameters() if name.startswith(VOXEL_PREFIXES)}
