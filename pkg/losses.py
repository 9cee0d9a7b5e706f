"""
Segmentation Losses: Dice and Multi-Scale Distribution-Aware Supervision

Key Features:
- dice_loss: joint soft Dice over batch, classes and pixels
- windowed_gt_distribution: class frequencies of non-overlapping ground-truth tiles
- kl_divergence_map / boundary_weight / dist_loss_scale: boundary-weighted KL
  between tile distributions and a head's predicted distribution
- msda_loss: lambda-weighted sum over decoder scales
- deep_supervision_loss: resize-then-cross-entropy baseline
- total_loss: combines the terms selected by the supervision switch into a LossReport

Conventions:
- 0 * log 0 = 0; Q is floored at 1e-12 inside the log
- Scale weights are given coarsest scale first
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import (DiffArray, add, clamp_min, log_softmax, mul, reduce_mean, reduce_sum,
                      softmax, sub)
from errors import ConfigurationError, NumericError, PreconditionError, ShapeError
from network import ModelConfig, ScaleOrder, Supervision
from spatial_ops import resize_bilinear

DICE_EPS = 1e-6
LOG_FLOOR = math.log(1e-12)


@dataclass
class WindowedDistribution:
    probs: np.ndarray            # [B, N, Hs, Ws], float64
    window: Tuple[int, int]      # (Kh, Kw)
    scale: int = 1


@dataclass
class LossReport:
    """Per-term breakdown of one loss evaluation; `loss` carries the graph."""
    dice: float
    per_scale_dist: List[float]
    lambdas: List[float]
    boundary_weight_stats: List[Tuple[float, float, float]]
    total: float
    supervision: str
    loss: Optional[DiffArray] = field(default=None, repr=False, compare=False)

    def recomputed_total(self) -> float:
        return self.dice + sum(w * d for w, d in zip(self.lambdas, self.per_scale_dist))

    def to_log_fields(self) -> Dict[str, object]:
        fields_out: Dict[str, object] = {"loss": self.total, "dice": self.dice,
                                         "supervision": self.supervision}
        for index, (weight, value) in enumerate(zip(self.lambdas, self.per_scale_dist), start=1):
            fields_out[f"dist{index}"] = value
            fields_out[f"lambda{index}"] = weight
        for index, (low, high, mean) in enumerate(self.boundary_weight_stats, start=1):
            fields_out[f"bw{index}_min"] = low
            fields_out[f"bw{index}_max"] = high
            fields_out[f"bw{index}_mean"] = mean
        return fields_out


def one_hot(gt: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """[B, H, W] class indices -> [B, N, H, W]."""
    gt = np.asarray(gt)
    if gt.size and (gt.min() < 0 or gt.max() >= num_classes):
        raise PreconditionError("one_hot", f"labels must lie in [0, {num_classes})")
    classes = np.arange(num_classes).reshape(1, num_classes, 1, 1)
    return (gt[:, None, :, :] == classes).astype(dtype)


# =============================================================================
# DICE
# =============================================================================

def dice_loss(pred_probs: DiffArray, gt_onehot: Union[np.ndarray, DiffArray], eps: float = DICE_EPS) -> DiffArray:
    """1 - 2 sum(p*y) / (sum(p^2) + sum(y^2) + eps), summed jointly over b, n, h, w."""
    target = gt_onehot.data if isinstance(gt_onehot, DiffArray) else np.asarray(gt_onehot)
    if target.shape != pred_probs.shape:
        raise ShapeError("dice_loss", f"prediction {pred_probs.shape} vs target {target.shape}")
    target = target.astype(pred_probs.dtype)
    intersection = reduce_sum(mul(pred_probs, target))
    denominator = add(reduce_sum(mul(pred_probs, pred_probs)), float((target * target).sum()) + eps)
    return sub(1.0, mul(intersection, 2.0) / denominator)


def dice_loss_per_class(pred_probs: DiffArray, gt_onehot: np.ndarray, eps: float = DICE_EPS) -> DiffArray:
    """Mean over classes of the per-class soft Dice loss."""
    target = np.asarray(gt_onehot).astype(pred_probs.dtype)
    if target.shape != pred_probs.shape:
        raise ShapeError("dice_loss_per_class", f"prediction {pred_probs.shape} vs target {target.shape}")
    axes = (0, 2, 3)
    intersection = reduce_sum(mul(pred_probs, target), axis=axes)
    denominator = add(reduce_sum(mul(pred_probs, pred_probs), axis=axes), (target * target).sum(axis=axes) + eps)
    return reduce_mean(sub(1.0, mul(intersection, 2.0) / denominator))


# =============================================================================
# DISTRIBUTION-AWARE TERMS
# =============================================================================

def windowed_gt_distribution(gt: np.ndarray, num_classes: int, out_size: Tuple[int, int],
                             scale: int = 1) -> WindowedDistribution:
    """Class frequencies over non-overlapping (H/Hs) x (W/Ws) tiles."""
    gt = np.asarray(gt)
    if gt.ndim != 3:
        raise ShapeError("windowed_gt_distribution", f"expected [B, H, W] labels, got {gt.shape}")
    batch, height, width = gt.shape
    out_h, out_w = out_size
    if out_h <= 0 or out_w <= 0 or height % out_h or width % out_w:
        raise ConfigurationError(f"{height}x{width} is not divisible into a {out_h}x{out_w} grid",
                                 key="scale")
    k_h, k_w = height // out_h, width // out_w
    hot = one_hot(gt, num_classes)
    probs = hot.reshape(batch, num_classes, out_h, k_h, out_w, k_w).mean(axis=(3, 5))
    return WindowedDistribution(probs=probs, window=(k_h, k_w), scale=scale)


def _probs_of(dist: Union[WindowedDistribution, np.ndarray]) -> np.ndarray:
    return dist.probs if isinstance(dist, WindowedDistribution) else np.asarray(dist, dtype=np.float64)


def kl_divergence_map(dist: Union[WindowedDistribution, np.ndarray], log_q: DiffArray) -> DiffArray:
    """Per-position KL(P || Q) over the class axis: [B, N, Hs, Ws] -> [B, Hs, Ws]."""
    probs = _probs_of(dist)
    if probs.shape != log_q.shape:
        raise ShapeError("kl_divergence_map", f"P {probs.shape} vs log Q {log_q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_term = np.where(probs > 0, probs * np.log(probs), 0.0).sum(axis=1)
    cross = reduce_sum(mul(clamp_min(log_q, LOG_FLOOR), probs.astype(log_q.dtype)), axis=1)
    return clamp_min(sub(entropy_term.astype(log_q.dtype), cross), 0.0)


def boundary_weight(dist: Union[WindowedDistribution, np.ndarray], alpha: float = 1.0) -> np.ndarray:
    """(1 - max_n P)^alpha: zero on pure tiles, positive on mixed tiles."""
    if alpha <= 0:
        raise PreconditionError("boundary_weight", f"alpha must be positive, got {alpha}")
    diversity = np.clip(1.0 - _probs_of(dist).max(axis=1), 0.0, 1.0)
    return diversity ** alpha


def dist_loss_scale(dist: Union[WindowedDistribution, np.ndarray], head_logits: DiffArray,
                    alpha: float = 1.0) -> DiffArray:
    """Mean over batch and positions of (1 + W) * KL."""
    weights = boundary_weight(dist, alpha)
    kl = kl_divergence_map(dist, log_softmax(head_logits, axis=1))
    return reduce_mean(mul(kl, (1.0 + weights).astype(head_logits.dtype)))


def _check_lambdas(lambdas: Sequence[float], scales: int):
    if len(lambdas) != scales:
        raise ConfigurationError(f"{len(lambdas)} weights for {scales} scales", key="lambdas")
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ConfigurationError("scale weights must be strictly increasing", key="lambdas")


def _aligned(lambdas: Sequence[float], order: ScaleOrder) -> List[float]:
    return list(reversed(lambdas)) if order is ScaleOrder.FINE_FIRST else list(lambdas)


def msda_terms(aux_logits: Sequence[DiffArray], gt: np.ndarray, num_classes: int,
               alpha: float) -> Tuple[List[DiffArray], List[np.ndarray]]:
    """Per-scale distributional losses and boundary weight maps (aux order)."""
    losses, weights = [], []
    for index, logits in enumerate(aux_logits, start=1):
        dist = windowed_gt_distribution(gt, num_classes, logits.shape[2:], scale=index)
        losses.append(dist_loss_scale(dist, logits, alpha))
        weights.append(boundary_weight(dist, alpha))
    return losses, weights


def msda_loss(aux_logits: Sequence[DiffArray], gt: np.ndarray, lambdas: Sequence[float],
              alpha: float = 1.0, num_classes: Optional[int] = None,
              order: ScaleOrder = ScaleOrder.COARSE_FIRST) -> DiffArray:
    """Sum over scales of lambda_s * dist_loss_scale; aux_logits are coarsest first."""
    _check_lambdas(lambdas, len(aux_logits))
    num_classes = num_classes or aux_logits[0].shape[1]
    losses, _ = msda_terms(aux_logits, gt, num_classes, alpha)
    total = None
    for weight, term in zip(_aligned(lambdas, order), losses):
        weighted = mul(term, weight)
        total = weighted if total is None else add(total, weighted)
    return total


def deep_supervision_loss(aux_logits: Sequence[DiffArray], gt: np.ndarray,
                          num_classes: int) -> List[DiffArray]:
    """Pixel-mean cross-entropy of each aux head after bilinear resize to full resolution."""
    height, width = np.asarray(gt).shape[1:]
    target = one_hot(gt, num_classes)
    terms = []
    for logits in aux_logits:
        resized = resize_bilinear(logits, height, width)
        log_probs = log_softmax(resized, axis=1)
        per_pixel = reduce_sum(mul(log_probs, target.astype(logits.dtype)), axis=1)
        terms.append(mul(reduce_mean(per_pixel), -1.0))
    return terms


# =============================================================================
# TOTAL
# =============================================================================

def total_loss(logits: DiffArray, aux_logits: Sequence[DiffArray], gt: np.ndarray,
               config: ModelConfig) -> LossReport:
    """Dice plus the auxiliary terms selected by config.supervision."""
    num_classes = config.num_classes
    dice = dice_loss(softmax(logits, axis=1), one_hot(gt, num_classes, logits.dtype))
    lambdas = _aligned(config.lambdas, config.msda_scale_order)
    loss = dice
    per_scale = [0.0] * len(lambdas)
    stats = [(0.0, 0.0, 0.0)] * len(lambdas)

    if config.supervision is not Supervision.DICE:
        if len(aux_logits) != len(lambdas):
            raise ShapeError("total_loss", f"{len(aux_logits)} aux outputs for {len(lambdas)} scale weights")
        _check_lambdas(config.lambdas, len(aux_logits))
        if config.supervision is Supervision.DICE_MSDA:
            terms, weight_maps = msda_terms(aux_logits, gt, num_classes, config.alpha)
            stats = [(float(w.min()), float(w.max()), float(w.mean())) for w in weight_maps]
        else:
            terms = deep_supervision_loss(aux_logits, gt, num_classes)
        for weight, term in zip(lambdas, terms):
            loss = add(loss, mul(term, weight))
        per_scale = [float(term.data) for term in terms]

    report = LossReport(dice=float(dice.data), per_scale_dist=per_scale, lambdas=[float(w) for w in lambdas],
                        boundary_weight_stats=stats, total=float(loss.data),
                        supervision=config.supervision.value, loss=loss)
    if not math.isfinite(report.total):
        raise NumericError("total_loss", "loss is not finite")
    return report
