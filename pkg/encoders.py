"""
Per-sensor feature extraction: residual multi-stage backbones for camera and
range view, a PointPillars pseudo-image encoder, a lift-splat image-to-BEV
mapping and the 1D pooling head used by the naive fusion modes.
"""

import logging
import math
from typing import Literal, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from geometry import PointCloud, camera_rays
from schemas import BackboneConfig, BevGridSpec, CameraSpec

logger = logging.getLogger(__name__)

SensorTag = Literal["camera", "lidar"]


class FeatureMap(NamedTuple):
    values: Tensor  # B×C×H×W
    stride: int
    sensor_tag: SensorTag


def group_norm(channels: int) -> nn.GroupNorm:
    # no batch statistics: frozen modules stay bit-identical in train mode
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = group_norm(out_ch)
        self.shortcut = (
            nn.Identity()
            if stride == 1 and in_ch == out_ch
            else nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), group_norm(out_ch))
        )

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """
    Stem (stride 2) followed by one residual stage per entry of
    `stage_channels` at strides 4, 8, 16, ...; every stage is resampled to
    `out_stride` and the stack is fused by a 1×1 convolution.
    """

    def __init__(self, cfg: BackboneConfig) -> None:
        super().__init__()
        self.cfg = cfg
        first = cfg.stage_channels[0]
        self.stem = nn.Sequential(nn.Conv2d(cfg.in_channels, first, 3, stride=2, padding=1, bias=False), group_norm(first), nn.ReLU())
        stages = []
        prev = first
        for ch in cfg.stage_channels:
            stages.append(nn.Sequential(ResidualBlock(prev, ch, stride=2), ResidualBlock(ch, ch)))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.fuse = nn.Conv2d(sum(cfg.stage_channels), cfg.fused_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        s = self.cfg.out_stride
        if h % s or w % s:
            raise ValueError(f"input {h}×{w} not divisible by out_stride {s}")
        size = (h // s, w // s)

        x = self.stem(x)
        pyramid = []
        for stage in self.stages:
            x = stage(x)
            if x.shape[-2:] == size:
                pyramid.append(x)
            elif x.shape[-2] > size[0]:
                pyramid.append(F.adaptive_avg_pool2d(x, size))
            else:
                pyramid.append(F.interpolate(x, size=size, mode="nearest"))
        return self.fuse(torch.cat(pyramid, dim=1))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig) -> None:
        super().__init__()
        self.backbone = Backbone(cfg)

    def forward(self, rgb: Tensor) -> FeatureMap:
        return encode_image(rgb, self.backbone)


def encode_image(rgb: Tensor, backbone: Backbone) -> FeatureMap:
    if rgb.numel() and (rgb.min() < 0 or rgb.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    return FeatureMap(backbone((rgb - 0.5) / 0.25), backbone.cfg.out_stride, "camera")


class RangeViewEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig, max_range_m: float) -> None:
        super().__init__()
        if cfg.in_channels != 4:
            raise ValueError(f"range view backbone needs 4 input channels, got {cfg.in_channels}")
        self.backbone = Backbone(cfg)
        self.scale = 1.0 / max_range_m

    def forward(self, range_view: Tensor) -> FeatureMap:
        return encode_range_view(range_view, self.backbone, self.scale)


def encode_range_view(range_view: Tensor, backbone: Backbone, scale: float = 1.0) -> FeatureMap:
    """B×4×H×W range view (x, y, z, r), scaled by `scale` before the stem."""
    if range_view.shape[-3] != 4:
        raise ValueError(f"range view needs 4 channels, got {range_view.shape[-3]}")
    return FeatureMap(backbone(range_view * scale), backbone.cfg.out_stride, "lidar")


# ============================================================================
# PointPillars
# ============================================================================


def clouds_to_tensor(clouds: list[PointCloud], dtype: torch.dtype = torch.float32) -> tuple[Tensor, Tensor]:
    """Pad a list of clouds to (B, N, 3) points with a (B, N) validity mask."""
    n = max((len(c) for c in clouds), default=0)
    points = torch.zeros(len(clouds), max(n, 1), 3, dtype=dtype)
    mask = torch.zeros(len(clouds), max(n, 1), dtype=torch.bool)
    for b, cloud in enumerate(clouds):
        points[b, : len(cloud)] = torch.as_tensor(cloud.points, dtype=dtype)
        mask[b, : len(cloud)] = True
    return points, mask


def range_view_to_points(range_view: Tensor) -> tuple[Tensor, Tensor]:
    """Flatten B×4×H×W range views to (B, H·W, 3) points and the valid mask."""
    flat = range_view.flatten(2).transpose(1, 2)
    return flat[..., :3], flat[..., 3] > 0


class PillarEncoder(nn.Module):
    def __init__(self, grid: BevGridSpec, channels: int, cfg: BackboneConfig, point_scale_m: float = 50.0) -> None:
        super().__init__()
        if cfg.in_channels != channels:
            raise ValueError(f"pillar backbone expects {cfg.in_channels} channels, pillars give {channels}")
        self.grid = grid
        self.channels = channels
        self.scale = 1.0 / point_scale_m
        self.point_net = nn.Sequential(nn.Linear(6, channels), nn.ReLU())
        self.backbone = Backbone(cfg)

    def pseudo_image(self, points: Tensor, mask: Tensor) -> Tensor:
        """Per-pillar max of per-point features scattered to B×C×X×Y."""
        b, n, _ = points.shape
        nx, ny = self.grid.dims
        res = self.grid.resolution_m
        ox, oy = self.grid.origin_m

        ix = torch.floor((points[..., 0] - ox) / res).long()
        iy = torch.floor((points[..., 1] - oy) / res).long()
        inside = mask & (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)

        dx = points[..., 0] - (ox + (ix.to(points.dtype) + 0.5) * res)
        dy = points[..., 1] - (oy + (iy.to(points.dtype) + 0.5) * res)
        r = points.norm(dim=-1)
        feats = torch.stack([points[..., 0], points[..., 1], points[..., 2], r, dx, dy], dim=-1) * self.scale
        feats = self.point_net(feats)  # B×N×C

        batch = torch.arange(b, device=points.device)[:, None].expand(b, n)
        cell = (batch * nx + ix) * ny + iy
        canvas = torch.zeros(b * nx * ny, self.channels, dtype=feats.dtype, device=feats.device)
        sel = inside.reshape(-1)
        index = cell.reshape(-1)[sel][:, None].expand(-1, self.channels)
        canvas = canvas.scatter_reduce(0, index, feats.reshape(-1, self.channels)[sel], reduce="amax", include_self=False)
        return canvas.view(b, nx, ny, self.channels).permute(0, 3, 1, 2)

    def forward(self, points: Tensor, mask: Tensor) -> FeatureMap:
        return FeatureMap(self.backbone(self.pseudo_image(points, mask)), self.backbone.cfg.out_stride, "lidar")


def encode_pillars(cloud: PointCloud, encoder: PillarEncoder) -> FeatureMap:
    points, mask = clouds_to_tensor([cloud], dtype=next(encoder.parameters()).dtype)
    return encoder(points, mask)


# ============================================================================
# Lift to BEV
# ============================================================================


class LiftToBEV(nn.Module):
    """
    Predicts a categorical depth distribution per feature pixel, lifts the
    features along each pixel ray (outer product) and sum-splats them into an
    ego X/Y grid. Lifted points outside the grid are dropped.
    """

    def __init__(
        self,
        cam: CameraSpec,
        stride: int,
        grid: BevGridSpec,
        channels: int,
        depth_bins: int = 32,
        depth_min_m: float = 1.0,
        depth_max_m: float = 50.0,
    ) -> None:
        super().__init__()
        self.grid = grid
        self.channels = channels
        self.depth_head = nn.Conv2d(channels, depth_bins, 1)

        feat_cam = cam.scaled(stride)
        origin, dirs = camera_rays(feat_cam)
        depths = np.linspace(depth_min_m, depth_max_m, depth_bins)
        pts = origin + depths[:, None, None, None] * dirs[None]  # D×Hf×Wf×3

        ix = np.floor((pts[..., 0] - grid.origin_m[0]) / grid.resolution_m).astype(np.int64)
        iy = np.floor((pts[..., 1] - grid.origin_m[1]) / grid.resolution_m).astype(np.int64)
        inside = (ix >= 0) & (ix < grid.dims[0]) & (iy >= 0) & (iy < grid.dims[1])
        cell = np.where(inside, ix * grid.dims[1] + iy, -1).reshape(-1)

        self.feature_shape = (feat_cam.height, feat_cam.width)
        self.register_buffer("source", torch.as_tensor(np.nonzero(cell >= 0)[0]), persistent=False)
        self.register_buffer("target", torch.as_tensor(cell[cell >= 0]), persistent=False)
        self.register_buffer("bin_depths", torch.as_tensor(depths, dtype=torch.float32), persistent=False)

    def depth_distribution(self, feat: Tensor) -> Tensor:
        return self.depth_head(feat).softmax(dim=1)

    def splat(self, feat: Tensor, probs: Tensor) -> Tensor:
        b, c, h, w = feat.shape
        if (h, w) != self.feature_shape:
            raise ValueError(f"feature map {h}×{w} does not match camera geometry {self.feature_shape}")
        lifted = probs[:, :, None] * feat[:, None]  # B×D×C×H×W
        flat = lifted.permute(0, 1, 3, 4, 2).reshape(b, -1, c)
        nx, ny = self.grid.dims
        canvas = torch.zeros(b, nx * ny, c, dtype=feat.dtype, device=feat.device)
        canvas.index_add_(1, self.target, flat[:, self.source])
        return canvas.view(b, nx, ny, c).permute(0, 3, 1, 2)

    def forward(self, feat: FeatureMap) -> FeatureMap:
        values = self.splat(feat.values, self.depth_distribution(feat.values))
        return FeatureMap(values, feat.stride, "camera")


def lift_image_to_bev(feat: FeatureMap, lift: LiftToBEV) -> FeatureMap:
    return lift(feat)


# ============================================================================
# 1D pooling head
# ============================================================================


class VectorPool(nn.Module):
    """Two stride-2 convolutions, global average pool, linear map to `out_dim`."""

    def __init__(self, channels: int, out_dim: int, activation: bool = True, bias: bool = True) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, stride=2, padding=1, bias=bias)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=2, padding=1, bias=bias)
        self.act = nn.ReLU() if activation else nn.Identity()
        self.proj = nn.Linear(channels, out_dim, bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        return self.proj(x.mean(dim=(-2, -1)))


def pool_to_vector(feat: FeatureMap, pool: VectorPool) -> Tensor:
    return pool(feat.values)
