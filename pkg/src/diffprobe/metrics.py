"""Evaluation metrics: confusion-matrix IoU, accuracy, F1."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(pred: np.ndarray, label: np.ndarray, num_classes: int,
                     ignore_index: int | None = None) -> np.ndarray:
    """(num_classes x num_classes) counts, rows = labels, cols = predictions."""
    pred = np.asarray(pred).ravel()
    label = np.asarray(label).ravel()
    if pred.shape != label.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {label.shape}")
    keep = np.ones(label.shape, dtype=bool)
    if ignore_index is not None:
        keep = label != ignore_index
    pred, label = pred[keep], label[keep]
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError(f"prediction class outside [0, {num_classes})")
    if label.size and (label.min() < 0 or label.max() >= num_classes):
        raise ValueError(f"label class outside [0, {num_classes})")
    counts = np.bincount(label * num_classes + pred, minlength=num_classes ** 2)
    return counts.reshape(num_classes, num_classes)


@dataclass
class IoUResult:
    per_class: np.ndarray          # NaN where the class has zero union
    miou: float                    # mean over classes with nonzero union
    no_valid_pixels: bool = False
    valid_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def compute_miou(pred, label, num_classes: int, ignore_index: int | None = None) -> IoUResult:
    """Per-class intersection-over-union plus the unweighted mean.

    Classes absent from both predictions and labels carry NaN and are
    excluded from the mean; ignore-index pixels never count anywhere. When
    every pixel is ignored the result is flagged ``no_valid_pixels``.
    """
    cm = confusion_matrix(pred, label, num_classes, ignore_index)
    if cm.sum() == 0:
        return IoUResult(np.full(num_classes, np.nan), float("nan"), no_valid_pixels=True)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    per_class = np.full(num_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    return IoUResult(per_class, float(per_class[present].mean()),
                     valid_classes=np.nonzero(present)[0])


def accuracy(pred: np.ndarray, label: np.ndarray) -> float:
    pred, label = np.asarray(pred).ravel(), np.asarray(label).ravel()
    if pred.shape != label.shape:
        raise ValueError("shape mismatch")
    if pred.size == 0:
        return float("nan")
    return float((pred == label).mean())


def f1_scores(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    """Micro and macro F1 over binary indicator arrays (N, C)."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    tp = (pred & target).sum(axis=0).astype(np.float64)
    fp = (pred & ~target).sum(axis=0).astype(np.float64)
    fn = (~pred & target).sum(axis=0).astype(np.float64)
    micro_denom = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = float(2 * tp.sum() / micro_denom) if micro_denom else float("nan")
    denom = 2 * tp + fp + fn
    per_class = np.full(pred.shape[1], np.nan)
    ok = denom > 0
    per_class[ok] = 2 * tp[ok] / denom[ok]
    macro = float(np.nanmean(per_class)) if ok.any() else float("nan")
    return {"micro": micro, "macro": macro}


def f1_from_labels(pred: np.ndarray, label: np.ndarray, num_classes: int) -> dict[str, float]:
    """F1 for single-label predictions via one-hot indicators."""
    pred, label = np.asarray(pred).ravel(), np.asarray(label).ravel()
    eye = np.eye(num_classes, dtype=bool)
    return f1_scores(eye[pred], eye[label])
