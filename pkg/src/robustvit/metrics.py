"""Shared accuracy/confusion counting.

Every accuracy number in the toolkit flows through :func:`accuracy` so that
reports, training logs, and sweeps cannot drift apart.
"""

from __future__ import annotations

import numpy as np


def _as_int_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if hasattr(values, "detach"):  # torch tensor
        arr = values.detach().cpu().numpy()
    return arr.astype(np.int64).ravel()


def confusion_counts(predicted, true, num_classes: int | None = None) -> np.ndarray:
    """Confusion matrix with rows = true class, columns = predicted class."""
    pred = _as_int_array(predicted)
    truth = _as_int_array(true)
    if pred.shape != truth.shape:
        raise ValueError(f"label arrays differ in length: {pred.shape} vs {truth.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return counts


def accuracy(predicted, true) -> float:
    """Fraction of correct predictions, computed from confusion counts."""
    counts = confusion_counts(predicted, true)
    total = counts.sum()
    if total == 0:
        raise ValueError("cannot compute accuracy of zero samples")
    return float(np.trace(counts) / total)
