"""Segmentation metrics: confusion-matrix mIoU and the Pearson correlation
between attention maps and downsampled ground-truth masks."""

from __future__ import annotations

import numpy as np

from .errors import MetricError, ShapeError
from .losses import UNLABELED


class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    def __init__(self, n_categories: int):
        self.n_categories = n_categories
        self.counts = np.zeros((n_categories, n_categories), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
        keep = gt != UNLABELED
        if not keep.any():
            return self
        k = self.n_categories
        flat = gt[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts
        return self


def miou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """(mean IoU over classes with nonzero union, per-class IoU with NaN
    marking excluded classes)."""
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - diag
    per_class = np.full(cm.n_categories, np.nan)
    valid = union > 0
    if not valid.any():
        raise MetricError("all classes absent from both prediction and ground truth")
    per_class[valid] = diag[valid] / union[valid]
    return float(per_class[valid].mean()), per_class


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson r over flattened pixels; constant inputs are undefined."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"pearson: {a.shape} vs {b.shape}")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0.0:
        raise MetricError("pearson undefined for a constant input")
    return float(np.clip((ac * bc).sum() / denom, -1.0, 1.0))
