"""Segmentation quality metrics: confusion matrix, per-class IoU, mean IoU.

Per-shard confusion matrices may be accumulated in parallel and merged by
elementwise addition; accumulation is order-independent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .core import IGNORE_INDEX, RGBDSample
from .data import iterate_batches


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[g][p] = pixels with ground truth g predicted p, ignored pixels
    excluded."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(
    cm: ConfusionMatrix,
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    ignore_index: int = IGNORE_INDEX,
) -> ConfusionMatrix:
    """Add per-pixel counts for one prediction/label pair, skipping ignored
    pixels; returns a new matrix."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != labels shape {gt.shape}")
    c = cm.num_classes
    mask = gt != ignore_index
    pred, gt = pred[mask], gt[mask]
    if pred.size and (pred.min() < 0 or pred.max() >= c):
        raise ValueError(f"prediction contains out-of-range class ids (C={c})")
    if gt.size and (gt.min() < 0 or gt.max() >= c):
        raise ValueError(f"labels contain out-of-range class ids (C={c})")
    flat = gt.astype(np.int64) * c + pred.astype(np.int64)
    delta = np.bincount(flat, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + delta)


def miou(cm: ConfusionMatrix) -> tuple[float, list[float]]:
    """Mean IoU over classes with non-empty union; per-class list carries NaN
    for excluded classes."""
    inter = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    valid = union > 0
    if not valid.any():
        raise ValueError("all classes empty: nothing to evaluate")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[valid] = inter[valid] / union[valid]
    return float(per_class[valid].mean()), per_class.tolist()


def predict_labels(logits: torch.Tensor) -> np.ndarray:
    """Argmax over channel-last logits."""
    return logits.argmax(dim=-1).cpu().numpy()


def evaluate_forward(
    forward_fn: Callable[[Sequence[RGBDSample]], torch.Tensor],
    samples: Sequence[RGBDSample],
    num_classes: int,
    batch_size: int = 8,
    ignore_index: int = IGNORE_INDEX,
) -> tuple[float, list[float], ConfusionMatrix]:
    """Run forward_fn over the set (partial final batch kept) and score the
    argmax predictions."""
    cm = ConfusionMatrix.zeros(num_classes)
    with torch.no_grad():
        for batch in iterate_batches(samples, batch_size, seed=0, shuffle=False, drop_last=False):
            logits = forward_fn(batch)
            preds = predict_labels(logits)
            gts = np.stack([s.labels for s in batch])
            cm = accumulate(cm, preds, gts, ignore_index)
    mean, per_class = miou(cm)
    return mean, per_class, cm
