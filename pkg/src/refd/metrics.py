"""Per-class F1, macro-F1, and the 8x8 confusion matrix.

F1 is computed as 2*TP / (pred_count + true_count), which equals
2PR/(P+R) and is defined as 0 whenever the denominator is 0 — matching
the published tables, where a never-predicted class scores 0.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import DataError

NUM_CLASSES = 8  # 0 = real, 1..6 = known fakes, 7 = novel


def _aligned(predictions, labels):
    p = np.asarray(predictions, dtype=np.int64).ravel()
    t = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise DataError(f"predictions {p.shape} vs labels {t.shape}")
    if p.size == 0:
        raise DataError("empty predictions")
    return p, t


def f1_per_class(predictions, labels, class_set) -> dict:
    """One-vs-rest F1 for every class in class_set.

    A class absent from both predictions and labels gets F1 = 0 and a
    warning — it is a reporting gap, not an error.
    """
    p, t = _aligned(predictions, labels)
    out = {}
    for c in class_set:
        c = int(c)
        tp = int(np.sum((p == c) & (t == c)))
        pred_count = int(np.sum(p == c))
        true_count = int(np.sum(t == c))
        if pred_count + true_count == 0:
            warnings.warn(
                f"class {c} absent from both predictions and labels; F1 = 0",
                stacklevel=2,
            )
            out[c] = 0.0
        else:
            out[c] = 2.0 * tp / (pred_count + true_count)
    return out


def macro_f1(per_class: dict) -> float:
    """Unweighted mean of the per-class F1 values."""
    if not per_class:
        raise DataError("empty per-class map")
    return float(sum(per_class.values()) / len(per_class))


def confusion_matrix(predictions, labels) -> np.ndarray:
    """counts[i, j] = samples of true class i predicted as class j."""
    p, t = _aligned(predictions, labels)
    if np.any((p < 0) | (p >= NUM_CLASSES)) or np.any((t < 0) | (t >= NUM_CLASSES)):
        raise DataError(f"classes must lie in 0..{NUM_CLASSES - 1}")
    out = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(out, (t, p), 1)
    return out
