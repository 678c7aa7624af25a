"""Bank-scoring kernels with two interchangeable backends.

The compiled Cython extension is preferred when it built; otherwise the
numpy/scipy implementation is used. Selection happens at import and can be
forced with the ``REFD_KERNELS`` environment variable (``compiled`` /
``numpy`` / ``auto``) or at runtime with :func:`use_backend`.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError

try:
    from . import _core

    HAVE_COMPILED = True
except ImportError:  # extension not built; numpy path covers everything
    _core = None
    HAVE_COMPILED = False

from . import _numpy

_active = "numpy"


def use_backend(name: str) -> None:
    """Select the kernel backend ("compiled", "numpy", or "auto")."""
    global _active
    if name == "auto":
        _active = "compiled" if HAVE_COMPILED else "numpy"
    elif name == "numpy":
        _active = "numpy"
    elif name == "compiled":
        if not HAVE_COMPILED:
            raise ConfigError(
                "compiled kernels requested but the extension is not built "
                "(reinstall, or set REFD_KERNELS=numpy)"
            )
        _active = "compiled"
    else:
        raise ConfigError(f"unknown kernel backend {name!r}")


def active_backend() -> str:
    return _active


use_backend(os.environ.get("REFD_KERNELS", "auto").lower())


def _as_matrix(a, name: str) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ConfigError(f"{name} must be 2-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"{name} must be finite")
    return out


def _check_pair(queries, bank, name_q="queries", name_b="bank"):
    q = _as_matrix(queries, name_q)
    b = _as_matrix(bank, name_b)
    if q.shape[1] != b.shape[1]:
        raise ConfigError(
            f"dimension mismatch: {name_q} d={q.shape[1]}, {name_b} d={b.shape[1]}"
        )
    if b.shape[0] < 1:
        raise ConfigError(f"{name_b} is empty")
    return q, b


def _check_k(k: int, m: int) -> int:
    k = int(k)
    if not 1 <= k <= m:
        raise ConfigError(f"k={k} outside 1..{m}")
    return k


def mean_weighted_similarity(queries, bank, weights, block_size: int = 4096):
    """out_i = (1/m) * sum_j weights_j * <queries_i, bank_j>."""
    q, b = _check_pair(queries, bank)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.shape != (b.shape[0],):
        raise ConfigError(f"weights shape {w.shape} != ({b.shape[0]},)")
    if _active == "compiled":
        out = np.empty(q.shape[0], dtype=np.float64)
        centroid = np.empty(q.shape[1], dtype=np.float64)
        _core.mean_weighted_similarity(q, b, w, centroid, out)
        return out
    return _numpy.mean_weighted_similarity(q, b, w, block_size)


def kth_neighbor_distance(queries, bank, k: int, block_size: int = 4096):
    """Euclidean distance from each query to its k-th nearest bank row."""
    q, b = _check_pair(queries, bank)
    k = _check_k(k, b.shape[0])
    if _active == "compiled":
        out = np.empty(q.shape[0], dtype=np.float64)
        # the compiled heap path packs one size-k heap per query of a block
        scratch = np.empty(max(b.shape[0], _core.HEAP_BLOCK * k),
                           dtype=np.float64)
        _core.kth_neighbor_distance(q, b, k, scratch, out)
        return out
    return _numpy.kth_neighbor_distance(q, b, k, block_size)


def topk_weighted_similarity_mean(queries, bank, weights, k: int,
                                  block_size: int = 4096):
    """Mean of weights_j * <q_i, bank_j> over the k bank rows most similar
    to q_i (neighbors picked by raw similarity)."""
    q, b = _check_pair(queries, bank)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.shape != (b.shape[0],):
        raise ConfigError(f"weights shape {w.shape} != ({b.shape[0]},)")
    k = _check_k(k, b.shape[0])
    if _active == "compiled":
        out = np.empty(q.shape[0], dtype=np.float64)
        size = max(b.shape[0], _core.HEAP_BLOCK * k)
        sim_scratch = np.empty(size, dtype=np.float64)
        val_scratch = np.empty(size, dtype=np.float64)
        _core.topk_weighted_similarity_mean(q, b, w, k, sim_scratch,
                                            val_scratch, out)
        return out
    return _numpy.topk_weighted_similarity_mean(q, b, w, k, block_size)
