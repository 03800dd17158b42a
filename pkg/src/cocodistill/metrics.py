"""Pixel accuracy and mean IoU over a confusion matrix."""
from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


class ConfusionMatrix:
    """counts[i, j] = pixels of true class i predicted as class j."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def accumulate(self, pred, true):
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise MetricError(f"prediction {pred.shape} and truth {true.shape} differ in shape")
        if pred.size == 0:
            return self
        k = self.num_classes
        for name, m in (("prediction", pred), ("truth", true)):
            if m.min() < 0 or m.max() >= k:
                raise MetricError(f"{name} holds a class outside [0, {k})")
        idx = true.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def _require_nonempty(self):
        if self.total == 0:
            raise MetricError("confusion matrix is empty")


def accumulate(cm, pred, true):
    return cm.accumulate(pred, true)


def accuracy(cm):
    cm._require_nonempty()
    return float(np.trace(cm.counts) / cm.total)


def miou(cm):
    """Mean over all k+1 classes; a class with an empty union scores 0."""
    cm._require_nonempty()
    p = cm.counts.astype(np.float64)
    inter = np.diag(p)
    union = p.sum(axis=1) + p.sum(axis=0) - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    return float(iou.mean())


def predict_mask(probs):
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    return np.asarray(probs).argmax(axis=-3)
