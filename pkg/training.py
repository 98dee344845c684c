"""
Training loop: windows of seq_len frames, every frame observed, AdamW on the
weighted multi-scale loss. PTF trains only the voxel decoder of a pre-trained
model; PTO starts from the same weights with everything open.
"""

import hashlib
import logging
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

from checkpoint import checkpoint_load, checkpoint_save
from config import SCALES
from dataset import Batch, SequenceDataset
from model import WorldModel, WorldModelOutput
from objectives import (
    LossReport,
    loss_image,
    loss_kl,
    loss_pointcloud,
    loss_scal_batch,
    loss_total,
    pool_images,
    pool_range_views,
)
from schemas import ExperimentConfig, MetricRecord
from tensorfile import save_tensor

logger = logging.getLogger(__name__)

METRIC_LOG_NAME = "metrics.jsonl"
LAST_CHECKPOINT_NAME = "last.mvck"


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, dump_dir: Path) -> None:
        super().__init__(f"{message} (batch dumped to {dump_dir})")
        self.dump_dir = dump_dir


@dataclass
class TrainResult:
    checkpoint: Path
    metric_log: Path
    steps: int
    last: dict[str, float]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def compute_loss(out: WorldModelOutput, batch: Batch, cfg: ExperimentConfig) -> LossReport:
    """Loss over every decoded frame; KL over the observed steps."""
    rgb_targets = pool_images(batch.rgb.flatten(0, 1))
    rv_targets = pool_range_views(batch.range_view.flatten(0, 1))
    dec = out.decoded

    flags: list[str] = []
    scale_terms = []
    for k, ratio in enumerate(SCALES):
        pc = loss_pointcloud(dec.range_views[k], rv_targets[k])
        if pc.empty:
            flags.append(f"empty_pointcloud@{ratio}")
        scale_terms.append({"img": loss_image(dec.image_probs[k], rgb_targets[k]), "p_xyz": pc.xyz, "p_r": pc.r})

    scal = None
    if dec.occupancy is not None and batch.occupancy is not None:
        result = loss_scal_batch(torch.sigmoid(dec.occupancy), batch.occupancy.flatten(0, 1))
        scal = result.loss
        flags += [f"scal_dropped:{name}" for name in result.dropped_terms]

    rollout = out.rollout
    kl = torch.stack([loss_kl(q, p) for q, p in zip(rollout.posteriors, rollout.priors)]).mean()
    return loss_total(scale_terms, cfg.weights, scal=scal, kl=kl, flags=flags)


def configure_parameters(model: WorldModel, cfg: ExperimentConfig) -> list[torch.nn.Parameter]:
    """Freeze per pretrain mode and return the parameters the optimizer owns."""
    if cfg.pretrain_mode != "PTF":
        return list(model.parameters())
    trainable = model.voxel_parameter_names()
    if not trainable:
        raise ValueError("PTF needs the occupancy head enabled")
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
        if name in trainable:
            params.append(p)
    return params


def load_pretrained(model: WorldModel, cfg: ExperimentConfig, force: bool = False) -> None:
    if cfg.pretrain_mode == "NPT":
        return
    checkpoint_load(
        cfg.checkpoint_path,
        model,
        cfg,
        match="model",
        allow_missing=model.voxel_parameter_names(),
        force=force,
    )
    logger.info("pre-trained weights attached | mode=%s path=%s", cfg.pretrain_mode, cfg.checkpoint_path)


def _dump_batch(run_dir: Path, step: int, batch: Batch) -> Path:
    dump = run_dir / f"nonfinite_step{step:06d}"
    dump.mkdir(parents=True, exist_ok=True)
    save_tensor(dump / "rgb.mvtf", batch.rgb.numpy())
    save_tensor(dump / "range_view.mvtf", batch.range_view.numpy())
    save_tensor(dump / "actions.mvtf", batch.actions.numpy())
    (dump / "keys.txt").write_text("\n".join(f"{s} {e} {t}" for s, e, t in batch.keys), encoding="utf-8")
    return dump


def train(
    cfg: ExperimentConfig,
    data_root: str | Path,
    run_dir: str | Path,
    resume: str | Path | None = None,
    force: bool = False,
    max_episodes: int | None = None,
) -> TrainResult:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)

    data = SequenceDataset(data_root, "train", cfg, max_episodes=max_episodes)
    model = WorldModel(cfg)
    load_pretrained(model, cfg, force=force)
    optimizer = torch.optim.AdamW(configure_parameters(model, cfg), lr=cfg.lr, weight_decay=cfg.weight_decay)

    start = 0
    log_path = run_dir / METRIC_LOG_NAME
    if resume is not None:
        start = checkpoint_load(resume, model, cfg, optimizer=optimizer, match="config", force=force).header.step
        logger.info("resuming | step=%d", start)
    elif log_path.exists():
        log_path.unlink()

    rng = np.random.default_rng([cfg.seed, start])
    noise = torch.Generator().manual_seed(cfg.seed + start)
    batches = data.forever(cfg.batch, rng)
    digest = hashlib.sha256()
    ckpt_path = run_dir / LAST_CHECKPOINT_NAME
    last: dict[str, float] = {}

    model.train()
    with open(log_path, "a", encoding="utf-8") as log:
        for step in tqdm(range(start + 1, cfg.steps + 1), desc=f"train {cfg.variant_tag}", initial=start, total=cfg.steps):
            batch = next(batches)
            out = model(batch, noise="sample", generator=noise)
            report = compute_loss(out, batch, cfg)

            if not torch.isfinite(report.total):
                dump = _dump_batch(run_dir, step, batch)
                logger.error("non-finite loss | step=%d | terms=%s", step, report.as_floats())
                raise NonFiniteLossError(f"non-finite loss at step {step}", dump)

            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            optimizer.step()

            last = report.as_floats()
            if step % cfg.log_every == 0 or step == cfg.steps:
                for term, value in last.items():
                    line = MetricRecord(step=step, split="train", term=term, value=value).model_dump_json()
                    log.write(line + "\n")
                    digest.update(line.encode("utf-8"))
                for flag in report.flags:
                    logger.debug("loss flag | step=%d %s", step, flag)

            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                log.flush()
                checkpoint_save(run_dir / f"step_{step:06d}.mvck", model, cfg, step, optimizer, digest.hexdigest()[:16])
                checkpoint_save(ckpt_path, model, cfg, step, optimizer, digest.hexdigest()[:16])

    if cfg.steps == start:
        checkpoint_save(ckpt_path, model, cfg, start, optimizer, digest.hexdigest()[:16])
    logger.info("training done | variant=%s steps=%d | total=%s", cfg.variant_tag, cfg.steps, last.get("total"))
    return TrainResult(ckpt_path, log_path, cfg.steps, last)


def read_metric_log(path: str | Path) -> list[MetricRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [MetricRecord.model_validate_json(line) for line in lines if line.strip()]
