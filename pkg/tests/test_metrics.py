import itertools
import math

import numpy as np
import pytest

from errors import DatasetError, ShapeError
from metrics import (boundary, dice_score, evaluate, evaluate_predictions, hd95, iou_score,
                     nearest_rank_percentile, pixel_accuracy, predict_masks, sample_metrics)
from network import DecoMamba
from run_logging import parse_fields


def brute_boundary(mask):
    height, width = mask.shape
    points = []
    for row, col in itertools.product(range(height), range(width)):
        if not mask[row, col]:
            continue
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            r, c = row + dr, col + dc
            if not (0 <= r < height and 0 <= c < width) or not mask[r, c]:
                points.append((row, col))
                break
    return points


def brute_hd95(pred, gt):
    if not pred.any() and not gt.any():
        return 0.0
    if not pred.any() or not gt.any():
        return math.hypot(*pred.shape)

    def directed(src, dst):
        dists = sorted(min(math.sqrt((r - s) ** 2 + (c - t) ** 2) for s, t in dst) for r, c in src)
        return dists[math.ceil(0.95 * len(dists)) - 1]

    a, b = brute_boundary(pred), brute_boundary(gt)
    return max(directed(a, b), directed(b, a))


# =============================================================================
# OVERLAP
# =============================================================================

def test_dice_examples():
    mask = np.array([[0, 1], [2, 1]])
    assert dice_score(mask, mask, 1) == 1.0
    assert dice_score(np.zeros((4, 4)), np.zeros((4, 4)), 2) == 1.0
    assert dice_score(np.array([[1, 0]]), np.array([[0, 1]]), 1) == 0.0

    pred, gt = np.zeros(200, dtype=int), np.zeros(200, dtype=int)
    pred[:100] = 1
    gt[50:150] = 1
    assert dice_score(pred, gt, 1) == pytest.approx(0.5)
    assert dice_score(gt, pred, 1) == dice_score(pred, gt, 1)
    assert iou_score(pred, gt, 1) == pytest.approx(50 / 150)


def test_pixel_accuracy():
    assert pixel_accuracy(np.array([[0, 1], [1, 1]]), np.array([[0, 1], [0, 0]])) == 0.5
    with pytest.raises(ShapeError):
        pixel_accuracy(np.zeros((2, 2)), np.zeros((2, 3)))


# =============================================================================
# HAUSDORFF
# =============================================================================

def test_boundary_of_a_square():
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:5, 1:5] = True
    edge = boundary(mask)
    assert edge.sum() == 12
    assert not edge[2:4, 2:4].any()
    full = boundary(np.ones((3, 3), dtype=bool))
    assert full.sum() == 8


def test_nearest_rank_percentile():
    assert nearest_rank_percentile(np.arange(1, 21)) == 19
    assert nearest_rank_percentile(np.arange(1, 11)) == 10
    assert nearest_rank_percentile(np.array([4.0])) == 4.0
    with pytest.raises(ValueError):
        nearest_rank_percentile(np.array([]))


def test_hd95_examples():
    mask = np.zeros((16, 16), dtype=bool)
    mask[3:9, 4:10] = True
    assert hd95(mask, mask) == 0.0

    a, b = np.zeros((16, 16), dtype=bool), np.zeros((16, 16), dtype=bool)
    a[2, 3] = True
    b[7, 3] = True
    assert hd95(a, b) == 5.0


def test_hd95_empty_masks():
    empty = np.zeros((30, 40), dtype=bool)
    one = empty.copy()
    one[4, 4] = True
    assert hd95(empty, empty) == 0.0
    assert hd95(one, empty) == 50.0
    assert hd95(empty, one) == 50.0
    with pytest.raises(ShapeError):
        hd95(empty, np.zeros((30, 41), dtype=bool))


def test_hd95_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        density_a, density_b = rng.uniform(0.0, 0.6, size=2)
        if trial % 25 == 0:
            density_a = 0.0
        pred = rng.uniform(size=(32, 32)) < density_a
        gt = rng.uniform(size=(32, 32)) < density_b
        assert hd95(pred, gt) == brute_hd95(pred, gt), f"trial {trial}"


# =============================================================================
# AGGREGATION
# =============================================================================

def test_ground_truth_prediction_is_perfect(rng):
    gts = [rng.integers(0, 3, size=(16, 16)) for _ in range(4)]
    report = evaluate_predictions(gts, gts, 3)
    assert report.mean_dice == 1.0
    assert report.mean_iou == 1.0
    assert report.mean_hd95 == 0.0
    assert report.pixel_accuracy == 1.0
    assert report.sample_count == 4


def test_background_prediction_scores_zero_dice():
    gt = np.zeros((8, 8), dtype=int)
    gt[:2] = 1
    gt[-2:] = 2
    report = evaluate_predictions([np.zeros_like(gt)] * 3, [gt] * 3, 3)
    assert report.mean_dice == 0.0
    assert report.mean_hd95 == pytest.approx(math.hypot(8, 8))
    assert report.per_class_dice[0] == pytest.approx(2 * 32 / (64 + 32))


def test_report_means_are_hand_averaged(rng):
    preds = [rng.integers(0, 4, size=(12, 12)) for _ in range(5)]
    gts = [rng.integers(0, 4, size=(12, 12)) for _ in range(5)]
    report = evaluate_predictions(preds, gts, 4, split="test")
    per_sample = [sample_metrics(p, g, 4) for p, g in zip(preds, gts)]

    dice = [sum(m.dice[c] for m in per_sample) / 5 for c in range(4)]
    hausdorff = [sum(m.hd95[c] for m in per_sample) / 5 for c in range(4)]
    np.testing.assert_allclose(report.per_class_dice, dice)
    assert report.mean_dice == pytest.approx(sum(dice[1:]) / 3)
    assert report.mean_hd95 == pytest.approx(sum(hausdorff[1:]) / 3)
    assert report.split == "test"


def test_evaluate_predictions_errors():
    with pytest.raises(DatasetError):
        evaluate_predictions([], [], 3)
    with pytest.raises(ShapeError):
        evaluate_predictions([np.zeros((4, 4))], [], 3)
    with pytest.raises(ShapeError):
        evaluate_predictions([np.zeros((4, 4))], [np.zeros((4, 5))], 3)


def test_report_lines_are_parseable(rng):
    gts = [rng.integers(0, 3, size=(8, 8)) for _ in range(2)]
    report = evaluate_predictions(gts, gts, 3)
    parsed = parse_fields(" ".join(report.to_lines()))
    assert parsed["split"] == "val"
    assert parsed["samples"] == "2"
    assert float(parsed["mean_dice"]) == 1.0
    assert {"dice_c0", "iou_c2", "hd95_c1", "pixel_acc"} <= set(parsed)


# =============================================================================
# MODEL EVALUATION
# =============================================================================

def test_evaluate_restores_training_mode(tiny_config, tiny_dataset):
    model = DecoMamba(tiny_config)
    val = tiny_dataset.split("val")
    report = evaluate(model, val, tiny_config, batch_size=1)
    assert model.training
    assert report.sample_count == 2
    assert report.split == "val"
    assert all(0.0 <= d <= 1.0 for d in report.per_class_dice)

    model.eval()
    again = evaluate(model, val, tiny_config, batch_size=1)
    assert not model.training
    assert again == report


def test_predict_masks_shape(tiny_config, tiny_dataset):
    model = DecoMamba(tiny_config).eval()
    images = np.stack([s.image for s in tiny_dataset.samples[:3]])
    masks = predict_masks(model, images, batch_size=2)
    assert masks.shape == (3, 32, 32)
    assert masks.min() >= 0 and masks.max() < 3


def test_evaluate_rejects_empty_dataset(tiny_config, tiny_dataset):
    with pytest.raises(DatasetError):
        evaluate(DecoMamba(tiny_config), tiny_dataset.split("test"), tiny_config)
