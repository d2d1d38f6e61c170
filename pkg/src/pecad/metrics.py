"""Evaluation metrics: class-weighted precision/recall, ROC AUC, per-patient
rates and mean IoU.

Any ratio with a zero denominator contributes 0, except the IoU of two
empty masks, which is 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class tallies; class 1 is PE, class 0 is non-PE treated as its own positive."""

    tp1: int
    fp1: int
    fn1: int
    tp0: int
    fp0: int
    fn0: int

    def __post_init__(self):
        if min(self.tp1, self.fp1, self.fn1, self.tp0, self.fp0, self.fn0) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp1 + self.fp1 + self.fn1 + self.tp0


@dataclass(frozen=True)
class ClassWeights:
    w1: float
    w0: float


@dataclass(frozen=True)
class PatientConfusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_verdicts(cls, truth: Sequence[bool], predicted: Sequence[bool]) -> "PatientConfusion":
        if len(truth) != len(predicted):
            raise ValueError("length mismatch")
        tp = fp = tn = fn = 0
        for t, p in zip(truth, predicted):
            if t and p:
                tp += 1
            elif t:
                fn += 1
            elif p:
                fp += 1
            else:
                tn += 1
        return cls(tp, fp, tn, fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _binary(values, name) -> np.ndarray:
    a = np.asarray(values)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1")
    return a.astype(bool)


def confusion_from_predictions(labels, preds) -> tuple[ConfusionCounts, ClassWeights]:
    y = _binary(labels, "labels")
    p = _binary(preds, "preds")
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise ValueError("empty input")
    tp1 = int(np.sum(y & p))
    fp1 = int(np.sum(~y & p))
    fn1 = int(np.sum(y & ~p))
    tp0 = int(np.sum(~y & ~p))
    counts = ConfusionCounts(tp1=tp1, fp1=fp1, fn1=fn1, tp0=tp0, fp0=fn1, fn0=fp1)
    w1 = float(y.mean())
    return counts, ClassWeights(w1=w1, w0=1.0 - w1)


def weighted_precision(counts: ConfusionCounts, weights: ClassWeights) -> float:
    return (_ratio(counts.tp0, counts.tp0 + counts.fp0) * weights.w0
            + _ratio(counts.tp1, counts.tp1 + counts.fp1) * weights.w1)


def weighted_recall(counts: ConfusionCounts, weights: ClassWeights) -> float:
    return (_ratio(counts.tp0, counts.tp0 + counts.fn0) * weights.w0
            + _ratio(counts.tp1, counts.tp1 + counts.fn1) * weights.w1)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(s_pos > s_neg) + P(tie)/2, via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def patient_metrics(pc: PatientConfusion) -> dict:
    return {
        "sensitivity": _ratio(pc.tp, pc.tp + pc.fn),
        "specificity": _ratio(pc.tn, pc.tn + pc.fp),
        "ppv": _ratio(pc.tp, pc.tp + pc.fp),
        "npv": _ratio(pc.tn, pc.tn + pc.fn),
    }


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    p = np.asarray(pred).astype(bool)
    t = np.asarray(target).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shape mismatch {p.shape} vs {t.shape}")
    union = int(np.sum(p | t))
    if union == 0:
        return 1.0
    return int(np.sum(p & t)) / union


def mean_iou(pred_masks, target_masks) -> float:
    """Image-wise mean of the PE-class IoU."""
    pred_masks, target_masks = list(pred_masks), list(target_masks)
    if len(pred_masks) != len(target_masks):
        raise ValueError("different numbers of predicted and target masks")
    if not pred_masks:
        raise ValueError("empty mask list")
    return float(np.mean([iou(p, t) for p, t in zip(pred_masks, target_masks)]))


def image_metrics(labels, scores, threshold: float = 0.5, preds=None) -> dict:
    """Weighted precision/recall at ``threshold`` (or given hard ``preds``) plus AUC."""
    labels = np.asarray(labels).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    if preds is None:
        preds = (scores >= threshold).astype(int)
    counts, weights = confusion_from_predictions(labels, preds)
    try:
        auc = roc_auc(scores, labels)
    except ValueError:
        auc = None
    return {
        "precision": weighted_precision(counts, weights),
        "recall": weighted_recall(counts, weights),
        "auc": auc,
        "confusion": asdict(counts),
        "weights": asdict(weights),
    }
