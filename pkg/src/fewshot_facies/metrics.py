"""Confusion-matrix based segmentation metrics (PA, class accuracy, MCA, FwIoU, FwF1)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


class EmptyEvaluationError(ValueError):
    pass


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns predictions (classes 1..C)."""

    def __init__(self, class_count: int, counts: Optional[np.ndarray] = None):
        self.class_count = class_count
        if counts is None:
            counts = np.zeros((class_count, class_count), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (class_count, class_count) or (counts < 0).any():
            raise ValueError("counts must be a non-negative C x C matrix")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        return accumulate(self, truth, pred)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_count != self.class_count:
            raise ValueError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.class_count, self.counts + other.counts)

    __add__ = merge


def accumulate(cm: ConfusionMatrix, truth: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape} vs prediction {pred.shape}")
    c = cm.class_count
    for name, arr in (("truth", truth), ("prediction", pred)):
        if arr.size and (arr.min() < 1 or arr.max() > c):
            raise ValueError(f"{name} values must lie in 1..{c}")
    idx = (truth.astype(np.int64).ravel() - 1) * c + (pred.astype(np.int64).ravel() - 1)
    counts = np.bincount(idx, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(c, cm.counts + counts)


@dataclass
class ClassStats:
    id: int
    acc: Optional[float]
    iou: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    pa: float
    mca: float
    fwiou: float
    fwf1: float
    per_class: List[ClassStats]
    total_pixels: int
    confusion: List[List[int]] = field(default_factory=list)

    @property
    def class_accuracy(self) -> List[Optional[float]]:
        return [c.acc for c in self.per_class]

    def to_dict(self) -> dict:
        return {
            "pa": self.pa,
            "mca": self.mca,
            "fwiou": self.fwiou,
            "fwf1": self.fwf1,
            "per_class": [vars(c).copy() for c in self.per_class],
            "total_pixels": self.total_pixels,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["pa"], d["mca"], d["fwiou"], d["fwf1"], [ClassStats(**c) for c in d["per_class"]],
                   d["total_pixels"])


def compute_report(cm: ConfusionMatrix) -> MetricsReport:
    """Derive all metrics from ``cm``.

    Classes absent from the ground truth get ``acc=None`` (reported as NA),
    are left out of MCA, and carry zero weight in the frequency-weighted
    scores.  Their prediction column still counts against other classes' IoU.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise EmptyEvaluationError("confusion matrix is empty")
    tp = np.diag(counts)
    rows = counts.sum(1)
    cols = counts.sum(0)
    present = rows > 0

    per_class = []
    accs = []
    fwiou = fwf1 = 0.0
    for j in range(cm.class_count):
        union = rows[j] + cols[j] - tp[j]
        iou = tp[j] / union if union > 0 else 0.0
        f1 = 2 * tp[j] / (rows[j] + cols[j]) if rows[j] + cols[j] > 0 else 0.0
        acc = tp[j] / rows[j] if present[j] else None
        if acc is not None:
            accs.append(acc)
            weight = rows[j] / total
            fwiou += weight * iou
            fwf1 += weight * f1
        per_class.append(ClassStats(j + 1, None if acc is None else float(acc), float(iou), float(f1),
                                    int(rows[j])))
    return MetricsReport(
        pa=float(tp.sum() / total),
        mca=float(np.mean(accs)),
        fwiou=float(fwiou),
        fwf1=float(fwf1),
        per_class=per_class,
        total_pixels=int(total),
        confusion=cm.counts.tolist(),
    )


def evaluate_masks(truths, preds, class_count: int) -> MetricsReport:
    cm = ConfusionMatrix(class_count)
    for t, p in zip(truths, preds):
        cm = accumulate(cm, t, p)
    return compute_report(cm)
