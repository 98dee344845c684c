"""
Latent state → observation space. Images and range views are upsampled from
per-modality seeds and read out at scales 1, 2, 4; occupancy comes from a 3D
transposed-convolution head.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dynamics import LatentState
from encoders import group_norm
from geometry import PointCloud, RangeImage, unproject_range_view
from schemas import CameraSpec, DecoderConfig, LatentMode, LidarSpec, VoxelGridSpec

logger = logging.getLogger(__name__)

IMAGE_SEED_STRIDE = 8
RANGE_SEED_STRIDE = 4


class LayoutMismatchError(ValueError):
    pass


class HeadDisabledError(RuntimeError):
    pass


class TokenLayout(NamedTuple):
    """Per-modality seed grids, in token concatenation order."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, int], ...]

    @property
    def counts(self) -> list[int]:
        return [h * w for h, w in self.shapes]

    @property
    def total(self) -> int:
        return sum(self.counts)


def decoder_layout(camera: CameraSpec, lidar: LidarSpec) -> TokenLayout:
    for what, (h, w), s in (
        ("camera", (camera.height, camera.width), IMAGE_SEED_STRIDE),
        ("range view", (lidar.rings, lidar.azimuths), RANGE_SEED_STRIDE),
    ):
        if h % s or w % s:
            raise LayoutMismatchError(f"{what} {h}×{w} not divisible by seed stride {s}")
    return TokenLayout(
        ("image", "range_view"),
        (
            (camera.height // IMAGE_SEED_STRIDE, camera.width // IMAGE_SEED_STRIDE),
            (lidar.rings // RANGE_SEED_STRIDE, lidar.azimuths // RANGE_SEED_STRIDE),
        ),
    )


def split_tokens(tokens: Tensor, layout: TokenLayout) -> list[Tensor]:
    """B×C×T → one B×C×H₀×W₀ seed per modality."""
    if tokens.shape[-1] != layout.total:
        raise LayoutMismatchError(f"{tokens.shape[-1]} tokens, layout expects {layout.counts}")
    parts = tokens.split(layout.counts, dim=-1)
    return [p.reshape(*p.shape[:-1], h, w) for p, (h, w) in zip(parts, layout.shapes)]


@dataclass
class DecoderOutput:
    images: list[Tensor]  # scales 1, 2, 4; logits B×3×H/σ×W/σ
    range_views: list[Tensor]  # scales 1, 2, 4; B×4×Hr/σ×Wr/σ, r ≥ 0
    occupancy: Tensor | None = None  # logits B×X×Y×Z

    @property
    def image_probs(self) -> list[Tensor]:
        return [torch.sigmoid(x) for x in self.images]


class UpsampleBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.norm = group_norm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.norm(self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))))


class MultiScaleDecoder(nn.Module):
    """Nearest ×2 upsample + conv per stage; heads tap the last three stages."""

    def __init__(self, in_ch: int, cfg: DecoderConfig, out_ch: int, doublings: int) -> None:
        super().__init__()
        if doublings < 2:
            raise ValueError(f"need at least 2 doublings for three output scales, got {doublings}")
        self.stem = nn.Sequential(nn.Conv2d(in_ch, cfg.channels, 3, padding=1, bias=False), group_norm(cfg.channels), nn.ReLU())
        widths = [cfg.channels]
        for _ in range(doublings):
            widths.append(max(widths[-1] // 2, cfg.min_channels))
        self.stages = nn.ModuleList(UpsampleBlock(a, b) for a, b in zip(widths[:-1], widths[1:]))
        # heads[0] → full scale, heads[2] → quarter scale
        self.heads = nn.ModuleList(nn.Conv2d(widths[-1 - k], out_ch, 1) for k in range(3))

    def forward(self, seed: Tensor) -> list[Tensor]:
        x = self.stem(seed)
        taps = [x]
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return [head(taps[-1 - k]) for k, head in enumerate(self.heads)]


class RangeViewHead(nn.Module):
    def __init__(self, decoder: MultiScaleDecoder, range_scale_m: float) -> None:
        super().__init__()
        self.decoder = decoder
        self.range_scale_m = range_scale_m

    def forward(self, seed: Tensor) -> list[Tensor]:
        out = []
        for raw in self.decoder(seed):
            xyz = raw[:, :3] * self.range_scale_m
            r = F.softplus(raw[:, 3:]) * self.range_scale_m
            out.append(torch.cat([xyz, r], dim=1))
        return out


class VoxelDecoder(nn.Module):
    """C×(X/4)×(Y/4)×(Z/4) volume → two ×2 transposed 3D convs → refine → 1×X×Y×Z logits."""

    def __init__(self, in_ch: int, grid: VoxelGridSpec, channels: int) -> None:
        super().__init__()
        if any(d % 4 for d in grid.dims):
            raise ValueError(f"voxel dims {grid.dims} must be divisible by 4")
        self.coarse = tuple(d // 4 for d in grid.dims)
        self.up = nn.Sequential(
            nn.Conv3d(in_ch, 2 * channels, 3, padding=1),
            nn.ReLU(),
            nn.ConvTranspose3d(2 * channels, channels, 2, stride=2),
            group_norm(channels),
            nn.ReLU(),
            nn.ConvTranspose3d(channels, channels, 2, stride=2),
            group_norm(channels),
            nn.ReLU(),
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.ReLU(),
        )
        self.final = nn.Conv3d(channels, 1, 1)

    def forward(self, volume: Tensor) -> Tensor:
        return self.final(self.up(volume))[:, 0]


class WorldDecoder(nn.Module):
    def __init__(
        self,
        cfg: DecoderConfig,
        latent_mode: LatentMode,
        layout: TokenLayout,
        state_channels: int,
        camera: CameraSpec,
        lidar: LidarSpec,
        grid: VoxelGridSpec | None,
    ) -> None:
        """
        state_channels: channels of concat(s, h) per token (2D) or its length (1D).
        grid: voxel grid of the occupancy head; None disables it.
        """
        super().__init__()
        self.cfg = cfg
        self.latent_mode = latent_mode
        self.layout = layout
        c = state_channels

        if latent_mode == "1D":
            self.seed_proj = nn.ModuleList(nn.Linear(c, cfg.channels * h * w) for h, w in layout.shapes)
            seed_ch = cfg.channels
        else:
            seed_ch = c

        if layout != decoder_layout(camera, lidar):
            raise LayoutMismatchError(f"layout {layout.shapes} does not fit camera/lidar resolution")
        self.image = MultiScaleDecoder(seed_ch, cfg, 3, IMAGE_SEED_STRIDE.bit_length() - 1)
        self.range_view = RangeViewHead(MultiScaleDecoder(seed_ch, cfg, 4, RANGE_SEED_STRIDE.bit_length() - 1), cfg.range_scale_m)

        self.voxel: VoxelDecoder | None = None
        if grid is not None:
            cells = (grid.dims[0] // 4) * (grid.dims[1] // 4) * (grid.dims[2] // 4)
            if latent_mode == "1D":
                self.voxel_seed = nn.Linear(c, cfg.voxel_channels * cells)
                voxel_in = cfg.voxel_channels
            else:
                # mixes the state tokens into the coarse volume; adds no tokens of its own
                self.voxel_seed = nn.Linear(layout.total, cells)
                voxel_in = c
            self.voxel = VoxelDecoder(voxel_in, grid, cfg.voxel_channels)

    @property
    def occupancy_enabled(self) -> bool:
        return self.voxel is not None

    def voxel_modules(self) -> list[nn.Module]:
        return [self.voxel_seed, self.voxel] if self.voxel is not None else []

    def state_input(self, state: LatentState) -> Tensor:
        return torch.cat([state.s, state.h], dim=1 if self.latent_mode == "2D" else -1)

    def seeds(self, x: Tensor) -> list[Tensor]:
        if self.latent_mode == "2D":
            return split_tokens(x, self.layout)
        return [proj(x).view(x.shape[0], self.cfg.channels, h, w) for proj, (h, w) in zip(self.seed_proj, self.layout.shapes)]

    def decode_voxels(self, x: Tensor) -> Tensor:
        if self.voxel is None:
            raise HeadDisabledError("occupancy head is disabled for this model")
        volume = self.voxel_seed(x)
        if self.latent_mode == "1D":
            volume = volume.view(x.shape[0], -1, *self.voxel.coarse)
        else:
            volume = volume.view(x.shape[0], x.shape[1], *self.voxel.coarse)
        return self.voxel(volume)

    def forward(self, state: LatentState) -> DecoderOutput:
        x = self.state_input(state)
        image_seed, range_seed = self.seeds(x)
        return DecoderOutput(
            images=decode_image(image_seed, self.image),
            range_views=decode_range_view(range_seed, self.range_view),
            occupancy=self.decode_voxels(x) if self.voxel is not None else None,
        )


def decode_image(seed: Tensor, decoder: MultiScaleDecoder) -> list[Tensor]:
    """Image logits at full, half and quarter scale."""
    return decoder(seed)


def decode_range_view(seed: Tensor, head: RangeViewHead) -> list[Tensor]:
    """Range views (x, y, z, r ≥ 0) in metres at full, half and quarter scale."""
    return head(seed)


def decoded_cloud(range_view: Tensor, empty_range_m: float = 0.05) -> PointCloud:
    """Point set of one decoded 4×H×W range view; cells with r < empty_range_m are empty."""
    channels = range_view.detach().cpu().double().numpy().copy()
    channels[:, channels[3] < empty_range_m] = 0.0
    return unproject_range_view(RangeImage(channels=channels))
