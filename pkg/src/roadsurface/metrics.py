"""Classification metrics: confusion matrix, Top-1, macro precision/recall/F1.

Macro averaging is per-class-then-unweighted-mean; every 0/0 (a class
absent from truth, prediction, or both) is defined as exactly 0 with no
smoothing epsilon.  F1 is the mean of per-class F1 values, not the F1 of
the mean precision and recall.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError


def confusion_matrix(truth, pred, num_classes: int) -> np.ndarray:
    """Count matrix with rows = true class, columns = predicted class."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise DimensionError(
            f"truth {truth.shape} and prediction {pred.shape} must be "
            "equal-length vectors"
        )
    if num_classes < 1:
        raise ContractError(f"num_classes must be positive, got {num_classes}")
    if truth.size and (
        truth.min() < 0 or truth.max() >= num_classes
        or pred.min() < 0 or pred.max() >= num_classes
    ):
        raise ContractError("labels out of range for confusion matrix")
    flat = truth * num_classes + pred
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def top1_from_confusion(confusion: np.ndarray) -> float:
    total = int(confusion.sum())
    if total == 0:
        raise ContractError("cannot compute Top-1 of an empty confusion matrix")
    return float(np.trace(confusion)) / total


def per_class_prf(confusion: np.ndarray):
    """Per-class (precision, recall, f1) arrays with exact 0/0 -> 0."""
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise DimensionError(
            f"confusion matrix must be square, got {confusion.shape}"
        )
    diag = np.diag(confusion)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    precision = np.zeros_like(diag)
    np.divide(diag, predicted, out=precision, where=predicted > 0)
    recall = np.zeros_like(diag)
    np.divide(diag, actual, out=recall, where=actual > 0)
    f1 = np.zeros_like(diag)
    np.divide(2.0 * precision * recall, precision + recall, out=f1,
              where=(precision + recall) > 0)
    return precision, recall, f1


def macro_prf(confusion: np.ndarray) -> tuple[float, float, float]:
    precision, recall, f1 = per_class_prf(confusion)
    return float(precision.mean()), float(recall.mean()), float(f1.mean())


@dataclass
class MetricsReport:
    """Confusion matrix and its derived summary statistics."""

    confusion: np.ndarray
    top1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float

    @classmethod
    def from_predictions(cls, truth, pred, num_classes: int) -> "MetricsReport":
        cm = confusion_matrix(truth, pred, num_classes)
        p, r, f1 = macro_prf(cm)
        return cls(confusion=cm, top1=top1_from_confusion(cm),
                   macro_precision=p, macro_recall=r, macro_f1=f1)

    @property
    def num_samples(self) -> int:
        return int(self.confusion.sum())

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_samples": self.num_samples,
                "top1": self.top1,
                "macro_precision": self.macro_precision,
                "macro_recall": self.macro_recall,
                "macro_f1": self.macro_f1,
            },
            indent=2,
        )

    def confusion_csv(self, class_names=None) -> str:
        n = self.confusion.shape[0]
        if class_names is None:
            class_names = [f"class{i}" for i in range(n)]
        lines = ["true\\pred," + ",".join(class_names)]
        for i in range(n):
            row = ",".join(str(int(v)) for v in self.confusion[i])
            lines.append(f"{class_names[i]},{row}")
        return "\n".join(lines) + "\n"
