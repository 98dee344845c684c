"""Qualitative dumps of one decoded window: RGB PNGs, point text files, occupancy tensors."""

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from checkpoint import checkpoint_load
from dataset import SequenceDataset, load_episode
from decoders import decoded_cloud
from geometry import PointCloud, RangeImage, unproject_range_view
from model import WorldModel
from schemas import ExperimentConfig, Split
from synthworld import gt_occupancy
from tensorfile import save_tensor

logger = logging.getLogger(__name__)


def save_rgb(path: Path, chw: np.ndarray) -> Path:
    plt.imsave(path, np.clip(np.transpose(chw, (1, 2, 0)), 0.0, 1.0))
    return path


def save_xyz(path: Path, cloud: PointCloud) -> Path:
    np.savetxt(path, cloud.points, fmt="%.4f")
    return path


@torch.no_grad()
def inspect_window(
    checkpoint: str | Path,
    cfg: ExperimentConfig,
    data_root: str | Path,
    split: Split,
    window: int,
    out_dir: str | Path,
    force: bool = False,
) -> list[Path]:
    """Decode window `window` of `split` with m observed / n imagined frames and dump every frame."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = WorldModel(cfg)
    checkpoint_load(checkpoint, model, cfg, match="config", force=force)
    model.eval()

    data = SequenceDataset(data_root, split, cfg, with_occupancy=False)
    if not 0 <= window < len(data):
        raise IndexError(f"window {window} outside [0, {len(data)})")
    batch = data.collate([window])
    out = model(batch, observed_m=cfg.observed_m, noise="mean")

    images = out.decoded.image_probs[0].numpy()
    rvs = out.decoded.range_views[0]
    occ = None if out.decoded.occupancy is None else torch.sigmoid(out.decoded.occupancy).numpy()

    ep_index, start = data.windows[window]
    meta = load_episode(data.root / data.entries[ep_index].path).meta

    written: list[Path] = []
    for t in range(out.length):
        phase = "obs" if t < cfg.observed_m else "pred"
        stem = f"t{t:02d}_{phase}"
        written.append(save_rgb(out_dir / f"{stem}_rgb_pred.png", images[t]))
        written.append(save_rgb(out_dir / f"{stem}_rgb_true.png", batch.rgb[0, t].numpy()))
        written.append(save_xyz(out_dir / f"{stem}_cloud_pred.xyz", decoded_cloud(rvs[t], cfg.model.decoder.empty_range_m)))
        true_cloud = unproject_range_view(RangeImage(channels=batch.range_view[0, t].double().numpy()))
        written.append(save_xyz(out_dir / f"{stem}_cloud_true.xyz", true_cloud))
        if occ is not None:
            save_tensor(out_dir / f"{stem}_occupancy_pred.mvtf", occ[t])
            truth = gt_occupancy(meta.world, meta.frames[start + t].ego, cfg.grid)
            save_tensor(out_dir / f"{stem}_occupancy_true.mvtf", truth.values)
            written += [out_dir / f"{stem}_occupancy_pred.mvtf", out_dir / f"{stem}_occupancy_true.mvtf"]

    logger.info("inspect dump | split=%s window=%d | files=%d dir=%s", split, window, len(written), out_dir)
    return written
