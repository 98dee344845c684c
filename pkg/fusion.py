"""
Sensor fusion into the latent observation o_t.

TR: per-sensor feature maps are flattened into tokens (feature + 2D
sinusoidal position + learned sensor embedding) and mixed by a pre-norm
transformer encoder. AVG / FC: each map is pooled to a vector and the vectors
are averaged or concatenated and projected.
"""

import logging
import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from encoders import FeatureMap, VectorPool
from schemas import FusionConfig, LatentMode

logger = logging.getLogger(__name__)

POS_EMBED_BASE = 10000.0


@dataclass(frozen=True)
class TokenSequence:
    tokens: Tensor  # B×N×C
    sources: Tensor  # N×3 long: (sensor, x, y)
    layout: tuple[tuple[int, int, int], ...]  # (sensor, H, W) in concatenation order

    @property
    def count(self) -> int:
        return self.tokens.shape[1]

    def blocks(self) -> list[Tensor]:
        return list(self.tokens.split([h * w for _, h, w in self.layout], dim=1))


def pos_embed_2d(h: int, w: int, c: int) -> Tensor:
    """
    C×H×W sinusoidal embedding. Channels [0, C/2) encode the column x,
    [C/2, C) the row y; inside each half even channels are sin, odd are cos.
    """
    if c % 4:
        raise ValueError(f"embedding channels must be divisible by 4, got {c}")
    quarter = c // 4
    freqs = 1.0 / POS_EMBED_BASE ** (torch.arange(quarter, dtype=torch.float64) / quarter)

    def encode(pos: Tensor) -> Tensor:
        angles = pos[:, None] * freqs[None]  # P×quarter
        return torch.stack([angles.sin(), angles.cos()], dim=-1).reshape(len(pos), 2 * quarter)

    ex = encode(torch.arange(w, dtype=torch.float64))  # W×C/2
    ey = encode(torch.arange(h, dtype=torch.float64))  # H×C/2
    emb = torch.cat([ex[None].expand(h, w, -1), ey[:, None].expand(h, w, -1)], dim=-1)
    return emb.permute(2, 0, 1).float().contiguous()


def tokenize(feats: list[FeatureMap], sensor_embeddings: Tensor) -> TokenSequence:
    """sensor_embeddings: N_s×C, one row per entry of `feats`, in order."""
    if not feats:
        raise ValueError("nothing to tokenize")
    channels = feats[0].values.shape[1]
    if any(f.values.shape[1] != channels for f in feats):
        raise ValueError(f"channel mismatch across sensors: {[f.values.shape[1] for f in feats]}")
    if sensor_embeddings.shape != (len(feats), channels):
        raise ValueError(f"sensor embeddings {tuple(sensor_embeddings.shape)} do not match {len(feats)}×{channels}")

    blocks, sources, layout = [], [], []
    for i, feat in enumerate(feats):
        _, c, h, w = feat.values.shape
        pos = pos_embed_2d(h, w, c).to(feat.values)
        tok = feat.values + pos[None] + sensor_embeddings[i][None, :, None, None]
        blocks.append(tok.flatten(2).transpose(1, 2))

        rows, cols = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
        sources.append(torch.stack([torch.full_like(rows, i), cols, rows], dim=-1).reshape(-1, 3))
        layout.append((i, h, w))

    return TokenSequence(torch.cat(blocks, dim=1), torch.cat(sources), tuple(layout))


class TransformerBlock(nn.Module):
    """Pre-norm encoder layer: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, channels: int, heads: int, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels),
            nn.GELU(),
            nn.Linear(mlp_ratio * channels, channels),
        )

    def forward(self, x: Tensor, need_weights: bool = False) -> tuple[Tensor, Tensor | None]:
        y = self.norm1(x)
        attended, weights = self.attn(y, y, y, need_weights=need_weights, average_attn_weights=False)
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, weights


class FusionTransformer(nn.Module):
    def __init__(self, cfg: FusionConfig) -> None:
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(cfg.channels, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))

    def forward(self, seq: TokenSequence) -> TokenSequence:
        x = seq.tokens
        for block in self.blocks:
            x, _ = block(x)
        return TokenSequence(x, seq.sources, seq.layout)

    def attention_maps(self, seq: TokenSequence) -> list[Tensor]:
        """Per-layer attention weights, each B×heads×N×N."""
        maps = []
        x = seq.tokens
        for block in self.blocks:
            x, weights = block(x, need_weights=True)
            maps.append(weights)
        return maps


def fuse_transformer(seq: TokenSequence, transformer: FusionTransformer) -> TokenSequence:
    return transformer(seq)


def fuse_avg(vectors: list[Tensor]) -> Tensor:
    if not vectors:
        raise ValueError("fuse_avg needs at least one vector")
    return torch.stack(vectors).mean(dim=0)


class ConcatFC(nn.Module):
    def __init__(self, n_inputs: int, in_dim: int, out_dim: int) -> None:
        super().__init__()
        self.fc = nn.Linear(n_inputs * in_dim, out_dim)
        self.act = nn.ReLU()

    def forward(self, vectors: list[Tensor]) -> Tensor:
        return self.act(self.fc(torch.cat(vectors, dim=-1)))


def fuse_concat_fc(vectors: list[Tensor], fc: ConcatFC) -> Tensor:
    return fc(vectors)


class Fusion(nn.Module):
    """
    Produces o_t from per-sensor feature maps.

    latent 2D: B×N×C tokens (TR keeps every token; AVG/FC yield a single
    token projected from the fused vector). latent 1D: B×D vector (TR pools
    each sensor's transformed block and combines them with concat + FC).
    """

    def __init__(self, cfg: FusionConfig, latent_mode: LatentMode) -> None:
        super().__init__()
        self.cfg = cfg
        self.latent_mode = latent_mode
        c, d = cfg.channels, cfg.latent_dim

        if cfg.mode == "TR":
            self.sensor_embeddings = nn.Parameter(torch.randn(cfg.sensors, c) * 0.02)
            self.transformer = FusionTransformer(cfg)
        if cfg.mode != "TR" or latent_mode == "1D":
            self.pools = nn.ModuleList(VectorPool(c, d) for _ in range(cfg.sensors))
        if cfg.mode == "FC" or (cfg.mode == "TR" and latent_mode == "1D"):
            self.fc = ConcatFC(cfg.sensors, d, d)
        if cfg.mode != "TR" and latent_mode == "2D":
            self.to_token = nn.Linear(d, c)

    @property
    def out_channels(self) -> int:
        """Width of o_t: token channels in 2D mode, vector length in 1D mode."""
        return self.cfg.channels if self.latent_mode == "2D" else self.cfg.latent_dim

    def forward(self, feats: list[FeatureMap]) -> Tensor:
        if len(feats) != self.cfg.sensors:
            raise ValueError(f"expected {self.cfg.sensors} sensors, got {len(feats)}")

        if self.cfg.mode == "TR":
            seq = self.transformer(tokenize(feats, self.sensor_embeddings))
            if self.latent_mode == "2D":
                return seq.tokens
            vectors = []
            for (_, h, w), block, pool in zip(seq.layout, seq.blocks(), self.pools):
                vectors.append(pool(block.transpose(1, 2).reshape(block.shape[0], -1, h, w)))
            return self.fc(vectors)

        vectors = [pool(f.values) for f, pool in zip(feats, self.pools)]
        fused = fuse_avg(vectors) if self.cfg.mode == "AVG" else self.fc(vectors)
        if self.latent_mode == "1D":
            return fused
        return self.to_token(fused)[:, None]


def token_count(feats: list[FeatureMap]) -> int:
    return sum(math.prod(f.values.shape[-2:]) for f in feats)
