"""Pure numpy/scipy kernel backend.

Each function processes test rows in blocks so peak memory stays at
O(block_size * m) regardless of n.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist


def mean_weighted_similarity(queries, bank, weights, block_size=4096):
    # linear in the bank rows, so fold them into one weighted centroid and
    # finish with a single mat-vec: O((n+m)d) instead of O(nmd).  No
    # blocking needed; the intermediate is a single length-d vector.
    centroid = weights @ bank
    return queries @ centroid / bank.shape[0]


def kth_neighbor_distance(queries, bank, k, block_size=4096):
    n = queries.shape[0]
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, block_size):
        hi = min(lo + block_size, n)
        # direct squared differences: a query equal to a bank row gets
        # exactly 0.0, which sqrt(2 - 2*sim) would not guarantee
        d2 = cdist(queries[lo:hi], bank, "sqeuclidean")
        out[lo:hi] = np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])
    return out


def topk_weighted_similarity_mean(queries, bank, weights, k, block_size=4096):
    n, m = queries.shape[0], bank.shape[0]
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, block_size):
        hi = min(lo + block_size, n)
        sims = queries[lo:hi] @ bank.T
        weighted = sims * weights[None, :]
        if k == m:
            out[lo:hi] = weighted.mean(axis=1)
        else:
            # neighbors are chosen by raw cosine similarity; the average is
            # over the energy-weighted similarities of those neighbors
            idx = np.argpartition(sims, m - k, axis=1)[:, m - k:]
            out[lo:hi] = np.take_along_axis(weighted, idx, axis=1).mean(axis=1)
    return out
