"""
Training losses (torch) and evaluation metrics (numpy / scipy).

    L = Σ_σ λ_σ [λ_img L_img + λ_pcd (L_xyz + L_r [+ extra])] + λ_V L_scal + λ_KL KL(q‖p)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree
from torch import Tensor

from config import PROB_EPS, PSNR_CAP_DB, SCALES
from dynamics import GaussianParams
from geometry import GeometryError, PointCloud, VoxelGrid
from schemas import Frozen, LossWeights

logger = logging.getLogger(__name__)

# k nearest candidates rescored exactly per Chamfer query
CHAMFER_CANDIDATES = 8


# ============================================================================
# Losses
# ============================================================================


def _check_shapes(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def loss_image(pred: Tensor, target: Tensor) -> Tensor:
    _check_shapes(pred, target)
    return (pred - target).abs().mean()


class LossPointCloud(NamedTuple):
    xyz: Tensor
    r: Tensor
    empty: bool


def loss_pointcloud(pred_rv: Tensor, target_rv: Tensor) -> LossPointCloud:
    """Masked by target validity (r > 0); channel axis is -3."""
    _check_shapes(pred_rv, target_rv)
    valid = target_rv[..., 3, :, :] > 0
    if not valid.any():
        logger.warning("point-cloud loss on a target without valid cells")
        zero = pred_rv.sum() * 0.0
        return LossPointCloud(zero, zero, True)

    pred = pred_rv.movedim(-3, -1)[valid]  # V×4
    target = target_rv.movedim(-3, -1)[valid]
    xyz = ((pred[:, :3] - target[:, :3]) ** 2).sum(dim=-1).mean()
    r = (pred[:, 3] - target[:, 3]).abs().mean()
    return LossPointCloud(xyz, r, False)


class ScalResult(NamedTuple):
    loss: Tensor
    dropped_terms: tuple[str, ...]


def loss_scal(pred_prob: Tensor, target: Tensor, eps: float = PROB_EPS) -> ScalResult:
    """
    Binary scene-class affinity over one grid:
    -(log precision + log recall + log specificity) / 3. Terms undefined for
    the target (no occupied or no empty voxel) are dropped.
    """
    _check_shapes(pred_prob, target)
    p = pred_prob.clamp(eps, 1 - eps)
    y = target.to(p.dtype)

    occupied = y.sum()
    empty = (1 - y).sum()
    terms, dropped = [], []
    if occupied > 0:
        tp = (p * y).sum()
        terms.append(torch.log(tp / p.sum()))
        terms.append(torch.log(tp / occupied))
    else:
        dropped += ["precision", "recall"]
    if empty > 0:
        terms.append(torch.log(((1 - p) * (1 - y)).sum() / empty))
    else:
        dropped.append("specificity")

    if not terms:
        return ScalResult(p.sum() * 0.0, tuple(dropped))
    return ScalResult(-torch.stack(terms).sum() / len(terms), tuple(dropped))


def loss_scal_batch(pred_prob: Tensor, target: Tensor) -> ScalResult:
    """Mean of per-grid SCAL over the leading axis."""
    results = [loss_scal(p, t) for p, t in zip(pred_prob, target)]
    dropped = tuple(sorted({name for r in results for name in r.dropped_terms}))
    return ScalResult(torch.stack([r.loss for r in results]).mean(), dropped)


def loss_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q‖p) of diagonal Gaussians, mean over elements."""
    _check_shapes(q.mean, p.mean)
    var_q, var_p = q.std**2, p.std**2
    kl = torch.log(p.std / q.std) + (var_q + (q.mean - p.mean) ** 2) / (2 * var_p) - 0.5
    return kl.mean()


@dataclass
class LossReport:
    terms: dict[str, Tensor]
    total: Tensor
    flags: list[str] = field(default_factory=list)

    def as_floats(self) -> dict[str, float]:
        values = {name: float(v.detach()) for name, v in self.terms.items()}
        values["total"] = float(self.total.detach())
        return values


def loss_total(
    scale_terms: list[dict[str, Tensor]],
    weights: LossWeights,
    scal: Tensor | None = None,
    kl: Tensor | None = None,
    flags: list[str] | None = None,
) -> LossReport:
    """
    scale_terms[k] holds "img", "p_xyz", "p_r" and optionally "pcd_extra"
    (an additional point-cloud term weighted with λ_pcd) for scale SCALES[k].
    Occupancy and KL enter once.
    """
    if len(scale_terms) > len(weights.scales):
        raise ValueError(f"{len(scale_terms)} scales but only {len(weights.scales)} scale weights")

    terms: dict[str, Tensor] = {}
    parts: list[Tensor] = []
    for ratio, lam, scale in zip(SCALES, weights.scales, scale_terms):
        pcd = scale["p_xyz"] + scale["p_r"] + scale.get("pcd_extra", 0.0)
        parts.append(lam * (weights.img * scale["img"] + weights.pcd * pcd))
        for name, value in scale.items():
            terms[f"{name}@{ratio}"] = value
    if scal is not None:
        terms["scal"] = scal
        parts.append(weights.voxel * scal)
    if kl is not None:
        terms["kl"] = kl
        parts.append(weights.kl * kl)

    total = torch.stack([torch.as_tensor(x) for x in parts]).sum() if parts else torch.zeros(())
    return LossReport(terms, total, list(flags or []))


# ============================================================================
# Multi-scale targets
# ============================================================================


def pool_images(images: Tensor) -> list[Tensor]:
    """B×C×H×W → average-pooled copies at every ratio in SCALES."""
    return [images if s == 1 else F.avg_pool2d(images, s) for s in SCALES]


def pool_range_views(range_views: Tensor) -> list[Tensor]:
    """
    B×4×H×W → per-ratio range views keeping, in every block, the valid cell
    with the smallest range; blocks without a valid cell stay empty.
    """
    out = []
    b = range_views.shape[0]
    for s in SCALES:
        if s == 1:
            out.append(range_views)
            continue
        r = range_views[:, 3:4]
        key = torch.where(r > 0, -r, torch.full_like(r, -math.inf))
        best, index = F.max_pool2d(key, s, return_indices=True)
        flat = range_views.flatten(2)
        picked = flat.gather(2, index.flatten(2).expand(b, 4, -1)).view(b, 4, *best.shape[-2:])
        out.append(torch.where(torch.isfinite(best), picked, torch.zeros_like(picked)))
    return out


# ============================================================================
# Metrics
# ============================================================================


def metric_psnr(pred: np.ndarray, target: np.ndarray, max_val: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_val**2 / mse))


def _nearest_sq(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared distance from every src point to its nearest dst point."""
    k = min(CHAMFER_CANDIDATES, len(dst))
    dist, idx = cKDTree(dst).query(src, k=k)
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    # rescore candidates with the same arithmetic as an exhaustive search
    cand = ((src[:, None, :] - dst[idx]) ** 2).sum(-1)
    best = cand.min(axis=1)

    # all k candidates tied within rounding: the exact minimum may lie outside them
    if k < len(dst):
        saturated = np.nonzero(dist[:, -1] - dist[:, 0] <= 1e-9 * np.maximum(dist[:, -1], 1.0))[0]
        for i in saturated:
            best[i] = ((src[i][None, :] - dst) ** 2).sum(-1).min()
    return best


def metric_chamfer(a: PointCloud, b: PointCloud) -> float:
    """mean_a min_b ‖a−b‖² + mean_b min_a ‖b−a‖²; nan when either cloud is empty."""
    if len(a) == 0 or len(b) == 0:
        return math.nan
    return float(_nearest_sq(a.points, b.points).mean() + _nearest_sq(b.points, a.points).mean())


def metric_chamfer_checked(a: PointCloud, b: PointCloud) -> float:
    if len(a) == 0 or len(b) == 0:
        raise GeometryError(f"chamfer undefined for empty cloud (sizes {len(a)}, {len(b)})")
    return metric_chamfer(a, b)


class OccupancyMetrics(Frozen):
    iou_pos: float
    iou_neg: float
    precision: float
    recall: float
    undefined: tuple[str, ...] = ()


def _ratio(num: int, den: int, vacuous: bool, name: str, undefined: list[str]) -> float:
    if den:
        return num / den
    undefined.append(name)
    return 1.0 if vacuous else 0.0


def metric_occupancy(pred_prob: np.ndarray | VoxelGrid, target: np.ndarray | VoxelGrid, threshold: float = 0.5) -> OccupancyMetrics:
    pred = np.asarray(pred_prob.values if isinstance(pred_prob, VoxelGrid) else pred_prob)
    true = np.asarray(target.values if isinstance(target, VoxelGrid) else target)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")

    p = pred >= threshold
    t = true > 0.5
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))

    undefined: list[str] = []
    return OccupancyMetrics(
        iou_pos=_ratio(tp, tp + fp + fn, True, "iou_pos", undefined),
        iou_neg=_ratio(tn, tn + fp + fn, True, "iou_neg", undefined),
        precision=_ratio(tp, tp + fp, fn == 0, "precision", undefined),
        recall=_ratio(tp, tp + fn, fp == 0, "recall", undefined),
        undefined=tuple(undefined),
    )
