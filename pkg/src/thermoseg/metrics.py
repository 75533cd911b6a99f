"""Confusion-matrix evaluation (pixAcc, per-class IoU, mIoU) and inference timing."""
from __future__ import annotations

import time

import numpy as np

from .autodiff import Tensor, no_grad


class ConfusionMatrix:
    """K x K pixel counts; counts[g][p] = pixels of ground truth g predicted p."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray, ignore_index: int = 255) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        k = self.num_classes
        keep = gt != ignore_index
        g = gt[keep]
        p = pred[keep]
        if g.size and (g.min() < 0 or g.max() >= k):
            raise ValueError(f"ground-truth label outside [0, {k - 1}]")
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ValueError(f"predicted label outside [0, {k - 1}]")
        binned = np.bincount(g.astype(np.int64) * k + p.astype(np.int64), minlength=k * k)
        self.counts += binned.reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix; pixel accuracy is undefined")
    return float(np.trace(cm.counts) / cm.total)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; classes with an empty union get NaN."""
    inter = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    out = np.full(cm.num_classes, np.nan)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean over classes with non-empty union (background is class 0, included)."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix; mIoU is undefined")
    ious = per_class_iou(cm)
    return float(np.nanmean(ious))


def predict_mask(model, image: Tensor, edges) -> np.ndarray:
    """Argmax class map for one image batch, eval mode, no graph recording."""
    with no_grad():
        logits = model.forward(image, edges=edges, train=False)
    return logits.data.argmax(axis=1)


def evaluate_model(model, samples, num_classes: int, ignore_index: int = 255) -> ConfusionMatrix:
    """Accumulate a confusion matrix over (image, mask, edges) triples."""
    cm = ConfusionMatrix(num_classes)
    for image, mask, edges in samples:
        pred = predict_mask(model, image, edges)
        cm.update(pred, mask[None] if mask.ndim == 2 else mask, ignore_index)
    return cm


def benchmark_inference(model, samples, warmup: int = 2, reps: int = 5) -> dict:
    """Per-image wall-clock seconds, eval mode, batch 1: mean and median over reps."""
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    samples = list(samples)
    if not samples:
        raise ValueError("benchmark needs at least one sample")
    for _ in range(warmup):
        for image, _, edges in samples:
            predict_mask(model, image, edges)
    per_rep = []
    for _ in range(reps):
        start = time.perf_counter()
        for image, _, edges in samples:
            predict_mask(model, image, edges)
        per_rep.append((time.perf_counter() - start) / len(samples))
    return {"mean_s": float(np.mean(per_rep)), "median_s": float(np.median(per_rep)), "reps": reps}
