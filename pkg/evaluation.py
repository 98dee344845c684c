"""
Evaluation: m observed frames (posterior reconstruction) and n imagined
frames (prior prediction) per window, scored with PSNR, Chamfer and the
occupancy metrics. One row per sequence plus a mean ± std summary.
"""

import json
import logging
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from tqdm import tqdm

from checkpoint import checkpoint_load
from dataset import SequenceDataset
from decoders import decoded_cloud
from geometry import RangeImage, unproject_range_view
from model import WorldModel
from objectives import metric_chamfer, metric_occupancy, metric_psnr
from schemas import ExperimentConfig, Frozen, Split

logger = logging.getLogger(__name__)

PHASES = ("observed", "future")


class EvalRow(Frozen):
    split: str
    episode: int
    start: int
    metrics: dict[str, float]


class MetricSummary(Frozen):
    mean: float
    std: float
    count: int


class EvalResult(Frozen):
    split: str
    variant_tag: str
    rows: list[EvalRow]
    summary: dict[str, MetricSummary]


def frame_metrics(
    pred_rgb: np.ndarray,
    true_rgb: np.ndarray,
    pred_rv: torch.Tensor,
    true_rv: np.ndarray,
    empty_range_m: float,
    pred_occ: np.ndarray | None = None,
    true_occ: np.ndarray | None = None,
) -> dict[str, float]:
    out = {
        "psnr": metric_psnr(pred_rgb, true_rgb),
        "chamfer": metric_chamfer(decoded_cloud(pred_rv, empty_range_m), unproject_range_view(RangeImage(channels=true_rv))),
    }
    if pred_occ is not None and true_occ is not None:
        occ = metric_occupancy(pred_occ, true_occ)
        out.update(iou_pos=occ.iou_pos, iou_neg=occ.iou_neg, precision=occ.precision, recall=occ.recall)
    return out


def _mean(values: list[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return float(np.mean(finite)) if finite else math.nan


def summarize(rows: list[EvalRow]) -> dict[str, MetricSummary]:
    names = sorted({k for row in rows for k in row.metrics})
    summary = {}
    for name in names:
        values = np.array([row.metrics[name] for row in rows if name in row.metrics], dtype=np.float64)
        values = values[~np.isnan(values)]
        summary[name] = MetricSummary(
            mean=float(values.mean()) if len(values) else math.nan,
            std=float(values.std()) if len(values) else math.nan,
            count=len(values),
        )
    return summary


@torch.no_grad()
def evaluate_model(model: WorldModel, cfg: ExperimentConfig, data_root: str | Path, split: Split) -> EvalResult:
    data = SequenceDataset(data_root, split, cfg, with_occupancy=cfg.occupancy_head)
    model.eval()
    m = cfg.observed_m
    empty = cfg.model.decoder.empty_range_m

    rows: list[EvalRow] = []
    for batch in tqdm(data.batches(cfg.batch), total=math.ceil(len(data) / cfg.batch), desc=f"eval {split}"):
        out = model(batch, observed_m=m, noise="mean")
        b, length = out.batch_size, out.length
        images = out.decoded.image_probs[0].unflatten(0, (b, length)).numpy()
        rvs = out.decoded.range_views[0].unflatten(0, (b, length))
        occ = None
        if out.decoded.occupancy is not None:
            occ = torch.sigmoid(out.decoded.occupancy).unflatten(0, (b, length)).numpy()

        for i, (sp, episode, start) in enumerate(batch.keys):
            per_phase: dict[str, list[dict[str, float]]] = {p: [] for p in PHASES}
            for t in range(length):
                per_phase["observed" if t < m else "future"].append(
                    frame_metrics(
                        images[i, t],
                        batch.rgb[i, t].numpy(),
                        rvs[i, t],
                        batch.range_view[i, t].double().numpy(),
                        empty,
                        None if occ is None else occ[i, t],
                        None if batch.occupancy is None else batch.occupancy[i, t].numpy(),
                    )
                )
            metrics = {
                f"{phase}/{name}": _mean([fm[name] for fm in frames])
                for phase, frames in per_phase.items()
                if frames
                for name in frames[0]
            }
            rows.append(EvalRow(split=sp, episode=episode, start=start, metrics=metrics))

    result = EvalResult(split=split, variant_tag=cfg.variant_tag, rows=rows, summary=summarize(rows))
    logger.info(
        "evaluated | variant=%s split=%s | sequences=%d observed/psnr=%.2f future/psnr=%.2f",
        cfg.variant_tag,
        split,
        len(rows),
        result.summary["observed/psnr"].mean,
        result.summary.get("future/psnr", MetricSummary(mean=math.nan, std=math.nan, count=0)).mean,
    )
    return result


def evaluate(
    checkpoint: str | Path,
    cfg: ExperimentConfig,
    data_root: str | Path,
    split: Split,
    out_dir: str | Path | None = None,
    plot: bool = False,
    force: bool = False,
) -> EvalResult:
    model = WorldModel(cfg)
    checkpoint_load(checkpoint, model, cfg, match="config", force=force)
    result = evaluate_model(model, cfg, data_root, split)
    if out_dir is not None:
        write_eval(result, out_dir, plot=plot)
    return result


def write_eval(result: EvalResult, out_dir: str | Path, plot: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / f"eval_{result.split}.jsonl"
    table.write_text("".join(row.model_dump_json() + "\n" for row in result.rows), encoding="utf-8")
    summary = out_dir / f"eval_{result.split}_summary.json"
    summary.write_text(json.dumps({k: v.model_dump() for k, v in result.summary.items()}, indent=2), encoding="utf-8")
    written = [table, summary]
    if plot:
        written.append(plot_summary(result, out_dir / f"eval_{result.split}.png"))
    return written


def plot_summary(result: EvalResult, path: Path) -> Path:
    names = [n for n in result.summary if not math.isnan(result.summary[n].mean)]
    fig, axes = plt.subplots(1, len(names), figsize=(2.2 * max(len(names), 1), 3), squeeze=False)
    for ax, name in zip(axes[0], names):
        s = result.summary[name]
        ax.bar([0], [s.mean], yerr=[s.std], color="tab:blue", capsize=4)
        ax.set_title(name, fontsize=8)
        ax.set_xticks([])
    fig.suptitle(f"{result.variant_tag} on {result.split}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
