"""
Episode datasets on disk and the sequence windows the trainer consumes.

Layout:
    <root>/manifest.json
    <root>/<split>/episode_<k>/meta.json
    <root>/<split>/episode_<k>/frame_<t>_{rgb,depth,cloud,route}.mvtf
"""

import logging
import shutil
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import Tensor
from tqdm import tqdm

from config import data_hash
from geometry import PointCloud, depth_to_points, fuse_occupancy_target, project_range_view
from schemas import DatasetManifest, EpisodeMeta, ExperimentConfig, FrameMeta, ManifestEntry, Split
from synthworld import FrameRecord, init_world, record_episode
from tensorfile import load_tensor, save_tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SPLITS: tuple[Split, ...] = ("train", "val_rl", "val_ds")

# Seed blocks keep splits disjoint for any sane episode count
SPLIT_SEED_OFFSET: dict[Split, int] = {"train": 0, "val_rl": 10_000, "val_ds": 20_000}


class DatasetError(ValueError):
    pass


# ============================================================================
# Generation
# ============================================================================


def episode_seed(cfg: ExperimentConfig, split: Split, k: int) -> int:
    return cfg.dataset.base_seed + SPLIT_SEED_OFFSET[split] + k


def episode_dir(root: Path, split: Split, k: int) -> Path:
    return root / split / f"episode_{k:04d}"


def frame_path(ep_dir: Path, t: int, kind: str) -> Path:
    return ep_dir / f"frame_{t:04d}_{kind}.mvtf"


def write_episode(ep_dir: Path, meta: EpisodeMeta, frames: list[FrameRecord]) -> None:
    ep_dir.mkdir(parents=True, exist_ok=True)
    for t, fr in enumerate(frames):
        save_tensor(frame_path(ep_dir, t, "rgb"), fr.rgb)
        save_tensor(frame_path(ep_dir, t, "depth"), fr.depth)
        ring = fr.cloud.ring_id if fr.cloud.ring_id is not None else np.full(len(fr.cloud), -1)
        save_tensor(frame_path(ep_dir, t, "cloud"), np.concatenate([fr.cloud.points, ring[:, None]], axis=1))
        save_tensor(frame_path(ep_dir, t, "route"), fr.route_bev)
    (ep_dir / "meta.json").write_text(meta.model_dump_json(indent=2), encoding="utf-8")


def _generate_episode(cfg: ExperimentConfig, root: Path, split: Split, k: int) -> ManifestEntry:
    seed = episode_seed(cfg, split, k)
    shift = cfg.dataset.domain_shift if split == "val_ds" else None
    world = init_world(seed, cfg.world.n_obstacles, cfg.world)
    frames = record_episode(world, cfg.dataset.frames, cfg.camera, cfg.lidar, cfg.world, domain_shift=shift)

    meta = EpisodeMeta(
        episode=k,
        split=split,
        seed=seed,
        domain_shift=shift is not None,
        config_hash=data_hash(cfg),
        world=world,
        camera=cfg.camera,
        lidar=cfg.lidar,
        frames=[
            FrameMeta(index=t, timestamp_s=fr.timestamp_s, ego=fr.ego, action=fr.action, n_points=len(fr.cloud))
            for t, fr in enumerate(frames)
        ],
    )
    ep_dir = episode_dir(root, split, k)
    write_episode(ep_dir, meta, frames)
    return ManifestEntry(split=split, episode=k, seed=seed, path=str(ep_dir.relative_to(root)), frames=len(frames))


def generate_dataset(cfg: ExperimentConfig, out_dir: str | Path, overwrite: bool = False) -> DatasetManifest:
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise DatasetError(f"{root} exists and is not empty (pass overwrite to replace it)")
        logger.warning("overwriting dataset | root=%s", root)
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)

    counts = {"train": cfg.dataset.train_episodes, "val_rl": cfg.dataset.val_rl_episodes, "val_ds": cfg.dataset.val_ds_episodes}
    jobs = [(split, k) for split in SPLITS for k in range(counts[split])]

    entries: list[ManifestEntry] = []
    errors: list[dict[str, object]] = []
    with ThreadPoolExecutor(max_workers=cfg.dataset.workers) as pool:
        futures = {pool.submit(_generate_episode, cfg, root, split, k): (split, k) for split, k in jobs}
        for fut in tqdm(as_completed(futures), total=len(futures), desc="episodes"):
            split, k = futures[fut]
            try:
                entries.append(fut.result())
                logger.debug("episode done | split=%s k=%d", split, k)
            except Exception as e:
                errors.append({"split": split, "episode": k, "error": str(e)})
                logger.exception("episode failed | split=%s k=%d", split, k)

    if errors:
        raise DatasetError(f"{len(errors)} episode(s) failed: {errors}")

    order = {s: i for i, s in enumerate(SPLITS)}
    entries.sort(key=lambda e: (order[e.split], e.episode))
    manifest = DatasetManifest(config_hash=data_hash(cfg), entries=entries)
    save_manifest(root, manifest)
    logger.info("dataset written | root=%s | episodes=%d hash=%s", root, len(entries), manifest.config_hash)
    return manifest


def save_manifest(root: str | Path, manifest: DatasetManifest) -> None:
    (Path(root) / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def load_manifest(root: str | Path) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no dataset at {root} (missing {MANIFEST_NAME})")
    return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))


# ============================================================================
# Loading
# ============================================================================


@dataclass
class EpisodeData:
    meta: EpisodeMeta
    rgb: np.ndarray  # T×3×H×W
    depth: np.ndarray  # T×1×H×W
    clouds: list[PointCloud]
    route: np.ndarray  # T×1×R×R


def load_episode(ep_dir: str | Path) -> EpisodeData:
    ep_dir = Path(ep_dir)
    meta = EpisodeMeta.model_validate_json((ep_dir / "meta.json").read_text(encoding="utf-8"))
    rgb, depth, clouds, route = [], [], [], []
    for t in range(len(meta.frames)):
        rgb.append(load_tensor(frame_path(ep_dir, t, "rgb")))
        depth.append(load_tensor(frame_path(ep_dir, t, "depth")))
        raw = load_tensor(frame_path(ep_dir, t, "cloud")).reshape(-1, 4).astype(np.float64)
        ring = raw[:, 3].astype(np.int64)
        clouds.append(PointCloud(points=raw[:, :3], ring_id=ring if len(ring) and ring.min() >= 0 else None))
        route.append(load_tensor(frame_path(ep_dir, t, "route")))
    return EpisodeData(meta, np.stack(rgb), np.stack(depth), clouds, np.stack(route))


@dataclass
class Batch:
    rgb: Tensor  # B×L×3×H×W in [0, 1]
    range_view: Tensor  # B×L×4×Hr×Wr
    actions: Tensor  # B×L×3: acceleration, steering, speed
    occupancy: Tensor | None  # B×L×X×Y×Z in {0, 1}
    keys: list[tuple[str, int, int]]  # (split, episode, window start)

    def to(self, dtype: torch.dtype) -> "Batch":
        occ = None if self.occupancy is None else self.occupancy.to(dtype)
        return Batch(self.rgb.to(dtype), self.range_view.to(dtype), self.actions.to(dtype), occ, self.keys)


@dataclass
class EpisodeTensors:
    rgb: Tensor
    range_view: Tensor
    actions: Tensor
    occupancy: Tensor | None


class SequenceDataset:
    """Length-`seq_len` windows over every episode of one split."""

    def __init__(
        self,
        root: str | Path,
        split: Split,
        cfg: ExperimentConfig,
        with_occupancy: bool | None = None,
        max_episodes: int | None = None,
        cache_episodes: int = 8,
    ) -> None:
        self.root = Path(root)
        self.split = split
        self.cfg = cfg
        self.with_occupancy = cfg.occupancy_head if with_occupancy is None else with_occupancy

        manifest = load_manifest(self.root)
        self.entries = manifest.split(split)[:max_episodes]
        if not self.entries:
            raise DatasetError(f"split {split!r} missing or empty in {self.root}")
        if manifest.config_hash != data_hash(cfg):
            logger.warning("dataset hash differs from config | dataset=%s config=%s", manifest.config_hash, data_hash(cfg))

        self.windows = [
            (i, start)
            for i, entry in enumerate(self.entries)
            for start in range(0, entry.frames - cfg.seq_len + 1, cfg.window_stride)
        ]
        if not self.windows:
            raise DatasetError(f"no window of length {cfg.seq_len} fits split {split!r}")
        self._episode = lru_cache(maxsize=cache_episodes)(self._load_episode)

    def __len__(self) -> int:
        return len(self.windows)

    def _load_episode(self, i: int) -> EpisodeTensors:
        data = load_episode(self.root / self.entries[i].path)
        if data.meta.camera != self.cfg.camera or data.meta.lidar != self.cfg.lidar:
            raise DatasetError(f"{self.entries[i].path}: sensor specs differ from the configuration")

        lidar = self.cfg.lidar
        rv = np.stack([project_range_view(c, lidar.rings, lidar.azimuths, lidar).channels for c in data.clouds])
        actions = np.array([[f.action.acceleration_mps2, f.action.steering_rad, f.ego.speed_mps] for f in data.meta.frames])

        occupancy = None
        if self.with_occupancy:
            occ = [
                fuse_occupancy_target(cloud, depth_to_points(depth, self.cfg.camera), self.cfg.grid).values
                for cloud, depth in zip(data.clouds, data.depth)
            ]
            occupancy = torch.as_tensor(np.stack(occ), dtype=torch.uint8)

        return EpisodeTensors(
            rgb=torch.as_tensor(data.rgb, dtype=torch.float32),
            range_view=torch.as_tensor(rv, dtype=torch.float32),
            actions=torch.as_tensor(actions, dtype=torch.float32),
            occupancy=occupancy,
        )

    def collate(self, indices: list[int]) -> Batch:
        rgb, rv, actions, occ, keys = [], [], [], [], []
        for idx in indices:
            i, start = self.windows[idx]
            ep = self._episode(i)
            sl = slice(start, start + self.cfg.seq_len)
            rgb.append(ep.rgb[sl])
            rv.append(ep.range_view[sl])
            actions.append(ep.actions[sl])
            if ep.occupancy is not None:
                occ.append(ep.occupancy[sl].float())
            keys.append((self.split, self.entries[i].episode, start))
        return Batch(
            torch.stack(rgb),
            torch.stack(rv),
            torch.stack(actions),
            torch.stack(occ) if occ else None,
            keys,
        )

    def batches(self, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = False) -> Iterator[Batch]:
        """One pass in window order, or shuffled by `rng`."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for lo in range(0, len(order), batch_size):
            chunk = order[lo : lo + batch_size].tolist()
            if drop_last and len(chunk) < batch_size:
                return
            yield self.collate(chunk)

    def forever(self, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
        while True:
            yield from self.batches(batch_size, rng, drop_last=len(self) >= batch_size)
