"""Classification metrics; UAR is the headline number everywhere."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    confusion: np.ndarray  # confusion[i, j]: true class i predicted as j
    accuracy: float
    per_class_recall: np.ndarray  # NaN for classes without support
    uar: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "uar": self.uar,
            "per_class_recall": [None if np.isnan(r) else float(r) for r in self.per_class_recall],
            "confusion": self.confusion.tolist(),
        }


def compute_metrics(predictions, labels, num_classes: int) -> Metrics:
    """Confusion matrix, accuracy and unweighted average recall.

    Classes with no true examples are left out of the UAR mean instead of
    counting as zero recall.
    """
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if pred.size == 0:
        raise ValueError("cannot compute metrics on empty input")
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"class index outside [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    return Metrics(
        confusion=confusion,
        accuracy=float(np.trace(confusion) / confusion.sum()),
        per_class_recall=recall,
        uar=float(np.nanmean(recall)),
    )


def argmax_low_tie(probs) -> np.ndarray:
    """Row-wise argmax; exact ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-1)
