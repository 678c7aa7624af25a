"""Small numeric primitives used throughout: row normalization, logsumexp
and softmax. All computation is float64."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRowError

# Rows with norm below this are treated as zero vectors and rejected rather
# than silently normalized into NaN.
ZERO_NORM_FLOOR = 1e-30


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite (no NaN/Inf)")


def l2_normalize_rows(m):
    """Scale every row to unit Euclidean norm.

    Accepts a 2-D array or a :class:`~refd.containers.FeatureMatrix` and
    returns the same kind. A row with norm below ``ZERO_NORM_FLOOR`` raises
    :class:`DegenerateRowError`.
    """
    from .containers import FeatureMatrix  # local import, avoids cycle

    if isinstance(m, FeatureMatrix):
        return FeatureMatrix(l2_normalize_rows(m.data), role=m.role)
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    _check_finite(a, "matrix")
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms < ZERO_NORM_FLOOR):
        bad = int(np.argmin(norms))
        raise DegenerateRowError(f"row {bad} has norm {norms[bad]:.3e}")
    return a / norms[:, None]


def logsumexp(v) -> float:
    """log(sum(exp(v))) with max subtraction, safe for entries up to 1e4."""
    a = np.asarray(v, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("logsumexp of an empty vector")
    _check_finite(a, "vector")
    hi = np.max(a)
    return float(hi + np.log(np.sum(np.exp(a - hi))))


def logsumexp_rows(a) -> np.ndarray:
    """Row-wise logsumexp of a 2-D array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ValueError(f"expected a nonempty 2-D array, got shape {a.shape}")
    _check_finite(a, "matrix")
    hi = np.max(a, axis=1, keepdims=True)
    return (hi + np.log(np.sum(np.exp(a - hi), axis=1, keepdims=True))).ravel()


def softmax(v) -> np.ndarray:
    """Softmax along the last axis, invariant to adding a constant."""
    a = np.asarray(v, dtype=np.float64)
    if a.size == 0 or a.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    _check_finite(a, "vector")
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)
