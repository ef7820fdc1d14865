"""Dataset-level segmentation metrics: confusion matrix, per-class IOU, mIoU, binary IOU."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .imagecore import IGNORE_LABEL, NUM_CLASSES


class ConfusionMatrix:
    """counts[g, p] = pixels with ground truth g predicted as p (ignore pixels skipped)."""

    def __init__(self, counts: Optional[np.ndarray] = None, n_classes: int = NUM_CLASSES):
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    __add__ = merge

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, acc: Optional[ConfusionMatrix] = None) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    acc = acc if acc is not None else ConfusionMatrix()
    n = acc.n_classes
    keep = gt != IGNORE_LABEL
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if np.any(g >= n) or np.any(p >= n):
        raise ValueError("label outside the confusion matrix range")
    counts = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(acc.counts + counts)


def iou_per_class(acc: ConfusionMatrix) -> np.ndarray:
    """IOU per class; NaN marks classes absent from both prediction and ground truth."""
    c = acc.counts
    tp = np.diag(c).astype(float)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def mean_over_present(ious) -> float:
    """Arithmetic mean of per-class IOUs, skipping absent (NaN) classes."""
    ious = np.asarray(ious, dtype=float)
    if np.isnan(ious).all():
        raise ValueError("no class present")
    return float(np.nanmean(ious))


def mean_iou(acc: ConfusionMatrix) -> float:
    if acc.total == 0:
        raise ValueError("no evaluated pixels")
    return mean_over_present(iou_per_class(acc))


def pixel_accuracy(acc: ConfusionMatrix) -> float:
    if acc.total == 0:
        raise ValueError("no evaluated pixels")
    return float(np.trace(acc.counts) / acc.total)


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|, with 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass
class EvalReport:
    per_class_iou: list  # None for absent classes
    mean_iou: float
    pixel_accuracy: float
    present: list
    confusion: list
    mean_binary_iou: Optional[float] = None
    both_empty_binary: int = 0  # images scored 1.0 by the both-empty convention

    @classmethod
    def from_confusion(cls, acc: ConfusionMatrix, binary_ious=None, both_empty: int = 0) -> "EvalReport":
        ious = iou_per_class(acc)
        present = ~np.isnan(ious)
        return cls(
            per_class_iou=[float(v) if ok else None for v, ok in zip(ious, present)],
            mean_iou=mean_iou(acc),
            pixel_accuracy=pixel_accuracy(acc),
            present=present.tolist(),
            confusion=acc.counts.tolist(),
            mean_binary_iou=None if not binary_ious else float(np.mean(binary_ious)),
            both_empty_binary=both_empty,
        )

    def to_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "pixel_accuracy": self.pixel_accuracy,
            "per_class_iou": self.per_class_iou,
            "present": self.present,
            "mean_binary_iou": self.mean_binary_iou,
            "both_empty_binary": self.both_empty_binary,
            "confusion": self.confusion,
        }

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def evaluate(pairs) -> EvalReport:
    """Aggregate (pred, gt) label-mask pairs into one report.

    Binary IOU per image compares non-background prediction to non-background
    ground truth with ignore pixels removed from both.
    """
    acc = ConfusionMatrix()
    bious = []
    both_empty = 0
    for pred, gt in pairs:
        acc = accumulate_confusion(pred, gt, acc)
        valid = gt != IGNORE_LABEL
        pf = (pred != 0) & valid
        gf = (gt != 0) & valid
        if not pf.any() and not gf.any():
            both_empty += 1
        bious.append(binary_iou(pf, gf))
    return EvalReport.from_confusion(acc, bious, both_empty)
