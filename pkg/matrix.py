"""
Experiment studies. Every run trains one configuration for the same step
budget and seed, evaluates it on both validation splits and contributes one
row per split; a failing run becomes an error row and the study goes on.

    fusion     A-B-C encoder/fusion variants
    latent     1D vs 2D latent for one variant
    occupancy  sensor metrics with and without the occupancy head
    pretrain   NPT / PTF / PTO sharing one camera+lidar pre-training run
"""

import logging
import math
from pathlib import Path
from typing import Callable, Literal

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from config import ALL_VARIANTS, CORE_VARIANTS
from evaluation import evaluate, write_eval
from schemas import ExperimentConfig, Frozen
from training import train

logger = logging.getLogger(__name__)

StudyName = Literal["fusion", "latent", "occupancy", "pretrain"]
STUDIES: tuple[StudyName, ...] = ("fusion", "latent", "occupancy", "pretrain")
EVAL_SPLITS = ("val_rl", "val_ds")

# metric → higher is better
RANKED_METRICS = {
    "future/psnr": True,
    "observed/psnr": True,
    "future/chamfer": False,
    "observed/chamfer": False,
    "future/iou_pos": True,
    "observed/iou_pos": True,
}


class StudyRow(Frozen):
    study: str
    run: str
    variant_tag: str
    latent_mode: str
    occupancy_head: bool
    pretrain_mode: str
    split: str
    metrics: dict[str, float] = {}
    error: str | None = None


class RankedEntry(Frozen):
    run: str
    value: float


class StudyReport(Frozen):
    study: str
    steps: int
    seed: int
    rows: list[StudyRow]
    ranking: dict[str, dict[str, list[RankedEntry]]]  # split → metric → best first

    @property
    def failed(self) -> list[StudyRow]:
        return [r for r in self.rows if r.error is not None]


def run_name(cfg: ExperimentConfig) -> str:
    occ = "occ" if cfg.occupancy_head else "noocc"
    return f"{cfg.variant_tag}_{cfg.latent_mode}_{occ}_{cfg.pretrain_mode}"


def _row(study: str, run: str, cfg: ExperimentConfig, split: str, metrics: dict[str, float] | None = None, error: str | None = None) -> StudyRow:
    return StudyRow(
        study=study,
        run=run,
        variant_tag=cfg.variant_tag,
        latent_mode=cfg.latent_mode,
        occupancy_head=cfg.occupancy_head,
        pretrain_mode=cfg.pretrain_mode,
        split=split,
        metrics=metrics or {},
        error=error,
    )


def run_one(study: str, cfg: ExperimentConfig, data_root: Path, out_dir: Path, run: str | None = None) -> list[StudyRow]:
    """Train + evaluate one configuration; failures become error rows."""
    run = run or run_name(cfg)
    run_dir = out_dir / run
    try:
        result = train(cfg, data_root, run_dir)
        rows = []
        for split in EVAL_SPLITS:
            ev = evaluate(result.checkpoint, cfg, data_root, split)
            write_eval(ev, run_dir)
            rows.append(_row(study, run, cfg, split, {k: v.mean for k, v in ev.summary.items()}))
        return rows
    except Exception as e:
        logger.exception("run failed | study=%s run=%s", study, run)
        return [_row(study, run, cfg, split, error=f"{type(e).__name__}: {e}") for split in EVAL_SPLITS]


def rank(rows: list[StudyRow]) -> dict[str, dict[str, list[RankedEntry]]]:
    ranking: dict[str, dict[str, list[RankedEntry]]] = {}
    for split in EVAL_SPLITS:
        ok = [r for r in rows if r.split == split and r.error is None]
        per_metric = {}
        for metric, higher in RANKED_METRICS.items():
            scored = [(r.run, r.metrics[metric]) for r in ok if not math.isnan(r.metrics.get(metric, math.nan))]
            if scored:
                scored.sort(key=lambda x: (-x[1] if higher else x[1], x[0]))
                per_metric[metric] = [RankedEntry(run=name, value=value) for name, value in scored]
        ranking[split] = per_metric
    return ranking


def _report(study: str, base: ExperimentConfig, steps: int, rows: list[StudyRow]) -> StudyReport:
    report = StudyReport(study=study, steps=steps, seed=base.seed, rows=rows, ranking=rank(rows))
    logger.info("study done | %s | runs=%d failed=%d", study, len(rows) // len(EVAL_SPLITS), len(report.failed) // len(EVAL_SPLITS))
    return report


def run_variant_matrix(
    base: ExperimentConfig,
    data_root: str | Path,
    out_dir: str | Path,
    steps: int,
    variants: tuple[str, ...] = ALL_VARIANTS,
) -> StudyReport:
    out_dir = Path(out_dir)
    rows: list[StudyRow] = []
    for tag in variants:
        cfg = base.model_copy(update={"variant_tag": tag, "steps": steps, "pretrain_mode": "NPT", "checkpoint_path": None})
        rows += run_one("fusion", cfg, Path(data_root), out_dir)
    return _report("fusion", base, steps, rows)


def run_latent_study(base: ExperimentConfig, data_root: str | Path, out_dir: str | Path, steps: int) -> StudyReport:
    rows: list[StudyRow] = []
    for mode in ("1D", "2D"):
        cfg = base.model_copy(update={"latent_mode": mode, "steps": steps, "pretrain_mode": "NPT", "checkpoint_path": None})
        rows += run_one("latent", cfg, Path(data_root), Path(out_dir))
    return _report("latent", base, steps, rows)


def run_occupancy_study(base: ExperimentConfig, data_root: str | Path, out_dir: str | Path, steps: int) -> StudyReport:
    rows: list[StudyRow] = []
    for head in (False, True):
        cfg = base.model_copy(update={"occupancy_head": head, "steps": steps, "pretrain_mode": "NPT", "checkpoint_path": None})
        rows += run_one("occupancy", cfg, Path(data_root), Path(out_dir))
    return _report("occupancy", base, steps, rows)


def run_pretrain_study(base: ExperimentConfig, data_root: str | Path, out_dir: str | Path, steps: int) -> StudyReport:
    """
    Pre-train camera+lidar (no occupancy head), then NPT / PTF / PTO with the
    head on, each for `steps` steps.
    """
    out_dir = Path(out_dir)
    pre_cfg = base.model_copy(update={"occupancy_head": False, "steps": steps, "pretrain_mode": "NPT", "checkpoint_path": None})
    rows: list[StudyRow] = []
    try:
        pretrained = train(pre_cfg, data_root, out_dir / "pretrain").checkpoint
    except Exception as e:
        logger.exception("pre-training failed")
        for mode in ("NPT", "PTF", "PTO"):
            cfg = base.model_copy(update={"occupancy_head": True, "pretrain_mode": mode})
            rows += [_row("pretrain", run_name(cfg), cfg, s, error=f"pre-training: {type(e).__name__}: {e}") for s in EVAL_SPLITS]
        return _report("pretrain", base, steps, rows)

    for mode in ("NPT", "PTF", "PTO"):
        update = {"occupancy_head": True, "steps": steps, "pretrain_mode": mode, "checkpoint_path": None if mode == "NPT" else str(pretrained)}
        cfg = ExperimentConfig.model_validate({**base.model_dump(), **update})
        rows += run_one("pretrain", cfg, Path(data_root), out_dir)
    return _report("pretrain", base, steps, rows)


STUDY_RUNNERS: dict[StudyName, Callable[..., StudyReport]] = {
    "fusion": run_variant_matrix,
    "latent": run_latent_study,
    "occupancy": run_occupancy_study,
    "pretrain": run_pretrain_study,
}


def run_study(
    name: StudyName,
    base: ExperimentConfig,
    data_root: str | Path,
    out_dir: str | Path,
    steps: int,
    plot: bool = False,
    core_only: bool = False,
) -> StudyReport:
    if name not in STUDY_RUNNERS:
        raise ValueError(f"unknown study {name!r}; expected one of {STUDIES}")
    if name == "fusion":
        report = run_variant_matrix(base, data_root, out_dir, steps, CORE_VARIANTS if core_only else ALL_VARIANTS)
    else:
        report = STUDY_RUNNERS[name](base, data_root, out_dir, steps)
    write_report(report, out_dir, plot=plot)
    return report


def write_report(report: StudyReport, out_dir: str | Path, plot: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{report.study}_report.json"
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    written = [path]
    if plot:
        written.append(plot_report(report, out_dir / f"{report.study}_report.png"))
    return written


def plot_report(report: StudyReport, path: Path, metric: str = "future/psnr") -> Path:
    """Grouped bars of one metric per run, one group per split."""
    runs = sorted({r.run for r in report.rows})
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(runs) + 2), 3.5))
    width = 0.8 / len(EVAL_SPLITS)
    for k, split in enumerate(EVAL_SPLITS):
        values = {r.run: r.metrics.get(metric, math.nan) for r in report.rows if r.split == split}
        ax.bar([i + k * width for i in range(len(runs))], [values.get(run, math.nan) for run in runs], width, label=split)
    ax.set_xticks([i + width / 2 for i in range(len(runs))])
    ax.set_xticklabels(runs, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
