"""Pixel accuracy and foreground/background mIoU for binarized heatmaps."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import DimensionError


@dataclass(frozen=True)
class SegmentationResult:
    pixel_accuracy: float
    miou: float
    iou_foreground: float | None
    iou_background: float | None
    # truth mask has a single class; miou then covers the classes that occur
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def binarize(heatmap, threshold_mode: str | float = "mean") -> np.ndarray:
    heatmap = np.asarray(heatmap, dtype=np.float64)
    threshold = heatmap.mean() if threshold_mode == "mean" else float(threshold_mode)
    return heatmap > threshold


def _iou(pred: np.ndarray, truth: np.ndarray) -> float | None:
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return None
    return float(np.logical_and(pred, truth).sum() / union)


def binary_metrics(pred, truth) -> SegmentationResult:
    pred, truth = np.asarray(pred, dtype=bool), np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and mask {truth.shape} differ in shape")
    accuracy = float((pred == truth).mean())
    fg, bg = _iou(pred, truth), _iou(~pred, ~truth)
    present = [v for v in (fg, bg) if v is not None]
    degenerate = bool(truth.all() or not truth.any())
    return SegmentationResult(accuracy, float(np.mean(present)), fg, bg, degenerate)


def segmentation_metrics(heatmap, truth_mask, threshold_mode: str | float = "mean") -> SegmentationResult:
    truth = np.asarray(truth_mask)
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.shape != truth.shape:
        raise DimensionError(f"heatmap {heatmap.shape} and mask {truth.shape} differ in shape")
    if not np.isin(truth, (0, 1)).all():
        raise ValueError("truth mask must be binary (0/1)")
    return binary_metrics(binarize(heatmap, threshold_mode), truth.astype(bool))
