"""
Segmentation Metrics for Deco-Mamba

Hard-label metrics on argmax masks: Dice, IoU, pixel accuracy and the 95th
percentile symmetric Hausdorff distance, plus whole-dataset evaluation.

Conventions:
- Dice and IoU of a class absent from both masks are 1.0
- Boundary pixels are foreground pixels with at least one background
  4-neighbor; pixels outside the image count as background
- Percentiles are nearest-rank: the ceil(0.95 * n)-th smallest distance
- HD95 is 0 when both masks are empty and the image diagonal when exactly one is
- Dataset means are per class per case, averaged over cases, then over
  foreground classes
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from autodiff import DiffArray, no_grad
from config_manager import get_thread_count
from errors import DatasetError, ShapeError
from run_logging import format_value

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


# =============================================================================
# OVERLAP METRICS
# =============================================================================

def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray, class_index: int) -> float:
    pred, gt = np.asarray(pred_mask) == class_index, np.asarray(gt_mask) == class_index
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def iou_score(pred_mask: np.ndarray, gt_mask: np.ndarray, class_index: int) -> float:
    pred, gt = np.asarray(pred_mask) == class_index, np.asarray(gt_mask) == class_index
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def pixel_accuracy(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError("pixel_accuracy", f"{pred_mask.shape} vs {gt_mask.shape}")
    return float((pred_mask == gt_mask).mean()) if gt_mask.size else 1.0


# =============================================================================
# HAUSDORFF DISTANCE
# =============================================================================

def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    return mask & ~ndimage.binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=0)


def nearest_rank_percentile(values: np.ndarray, percent: float = 95.0) -> float:
    ordered = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if ordered.size == 0:
        raise ValueError("percentile of an empty set")
    rank = max(int(math.ceil(percent / 100.0 * ordered.size)), 1)
    return float(ordered[rank - 1])


def directed_boundary_distances(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Distance from every boundary pixel of source to the nearest boundary pixel of target."""
    source_points = np.argwhere(boundary(source))
    target_edge = boundary(target)
    # indices of the nearest target boundary pixel for every pixel in the image
    _, nearest = ndimage.distance_transform_edt(~target_edge, return_indices=True)
    rows, cols = source_points[:, 0], source_points[:, 1]
    dy = nearest[0][rows, cols] - rows
    dx = nearest[1][rows, cols] - cols
    return np.sqrt((dy * dy + dx * dx).astype(np.float64))


def hd95(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Symmetric 95th-percentile boundary Hausdorff distance in pixels."""
    pred, gt = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError("hd95", f"expected two equal 2-D masks, got {pred.shape} and {gt.shape}")
    pred_empty, gt_empty = not pred.any(), not gt.any()
    if pred_empty and gt_empty:
        return 0.0
    if pred_empty or gt_empty:
        return empty_mask_sentinel(pred.shape)
    forward = nearest_rank_percentile(directed_boundary_distances(pred, gt))
    backward = nearest_rank_percentile(directed_boundary_distances(gt, pred))
    return max(forward, backward)


def empty_mask_sentinel(shape) -> float:
    return float(math.hypot(shape[0], shape[1]))


# =============================================================================
# AGGREGATION
# =============================================================================

@dataclass
class SampleMetrics:
    dice: np.ndarray         # [N]
    iou: np.ndarray          # [N]
    hd95: np.ndarray         # [N]
    accuracy: float


@dataclass
class EvalReport:
    per_class_dice: List[float]
    per_class_iou: List[float]
    per_class_hd95: List[float]
    mean_dice: float
    mean_iou: float
    mean_hd95: float
    pixel_accuracy: float
    sample_count: int
    split: str = "val"
    extra: Dict[str, float] = field(default_factory=dict)

    def to_log_fields(self) -> Dict[str, object]:
        fields_out: Dict[str, object] = {
            "split": self.split,
            "samples": self.sample_count,
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
            "mean_hd95": self.mean_hd95,
            "pixel_acc": self.pixel_accuracy,
        }
        for index, (d, i, h) in enumerate(zip(self.per_class_dice, self.per_class_iou, self.per_class_hd95)):
            fields_out[f"dice_c{index}"] = d
            fields_out[f"iou_c{index}"] = i
            fields_out[f"hd95_c{index}"] = h
        fields_out.update(self.extra)
        return fields_out

    def to_lines(self) -> List[str]:
        """One metric per line, key=value."""
        return [f"{key}={format_value(value)}" for key, value in self.to_log_fields().items()]


def sample_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray, num_classes: int) -> SampleMetrics:
    classes = range(num_classes)
    return SampleMetrics(
        dice=np.array([dice_score(pred_mask, gt_mask, c) for c in classes]),
        iou=np.array([iou_score(pred_mask, gt_mask, c) for c in classes]),
        hd95=np.array([hd95(pred_mask == c, gt_mask == c) for c in classes]),
        accuracy=pixel_accuracy(pred_mask, gt_mask),
    )


def evaluate_predictions(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_classes: int,
                         split: str = "val") -> EvalReport:
    """Per-sample metrics in parallel, reduced in sample order."""
    if len(preds) != len(gts):
        raise ShapeError("evaluate_predictions", f"{len(preds)} predictions for {len(gts)} masks")
    if len(gts) == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    for pred, gt in zip(preds, gts):
        if np.shape(pred) != np.shape(gt):
            raise ShapeError("evaluate_predictions", f"prediction {np.shape(pred)} vs mask {np.shape(gt)}")

    workers = max(min(get_thread_count(), len(gts)), 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_sample = list(pool.map(lambda pair: sample_metrics(pair[0], pair[1], num_classes), zip(preds, gts)))

    dice = np.mean([m.dice for m in per_sample], axis=0)
    iou = np.mean([m.iou for m in per_sample], axis=0)
    hausdorff = np.mean([m.hd95 for m in per_sample], axis=0)
    foreground = slice(1, None)
    return EvalReport(
        per_class_dice=[float(v) for v in dice],
        per_class_iou=[float(v) for v in iou],
        per_class_hd95=[float(v) for v in hausdorff],
        mean_dice=float(dice[foreground].mean()),
        mean_iou=float(iou[foreground].mean()),
        mean_hd95=float(hausdorff[foreground].mean()),
        pixel_accuracy=float(np.mean([m.accuracy for m in per_sample])),
        sample_count=len(per_sample),
        split=split,
    )


def predict_logits(model, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return model(DiffArray(np.asarray(images, dtype=np.float32))).logits.data


def predict_masks(model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax labels for [B, C, H, W] images, evaluated in batches."""
    outputs = []
    for start in range(0, len(images), batch_size):
        logits = predict_logits(model, images[start:start + batch_size])
        outputs.append(np.argmax(logits, axis=1))
    return np.concatenate(outputs, axis=0)


def evaluate(model, dataset, config=None, batch_size: int = 8, split: Optional[str] = None) -> EvalReport:
    """Evaluate a model on every sample of a dataset in eval mode."""
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    num_classes = config.num_classes if config is not None else dataset.num_classes
    was_training = model.training
    model.eval()
    try:
        preds, gts = [], []
        for start in range(0, len(dataset), batch_size):
            chunk = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            images = np.stack([s.image for s in chunk])
            preds.extend(predict_masks(model, images, batch_size))
            gts.extend(s.mask for s in chunk)
    finally:
        model.train(was_training)
    if split is None:
        split = dataset[0].split
    return evaluate_predictions(preds, gts, num_classes, split=split)
