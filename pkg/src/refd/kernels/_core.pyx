# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend: tight loops over typed memoryviews.

Same contracts as _numpy; callers allocate output (and scratch) arrays so
this module needs nothing beyond libc. The per-element loops live in
_hot.h as plain C so they vectorize (see the note there). Queries are
processed in blocks so each bank row is streamed from memory once per
block instead of once per query, and selection keeps a size-k heap per
query instead of materializing all m candidates when k is small.
"""

from libc.math cimport sqrt

cdef extern from "_hot.h" nogil:
    double refd_dot(const double *a, const double *b, Py_ssize_t d)
    double refd_sqdist(const double *a, const double *b, Py_ssize_t d)

# below this, per-query top-k bookkeeping beats the full-scratch quickselect
DEF HEAP_MAX_K = 64
# queries per block: the bank (the large operand) is streamed once per
# block instead of once per query, so each row is reused while hot
DEF QBLOCK = 8

# dispatch needs the block size to size the packed-heap scratch
HEAP_BLOCK = QBLOCK


cdef inline void _swap(double[::1] a, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef double t = a[i]
    a[i] = a[j]
    a[j] = t


cdef double _kth_smallest(double[::1] a, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    """k-th smallest (0-indexed) by Hoare quickselect; rearranges a."""
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j, mid
    cdef double pivot
    while lo < hi:
        mid = lo + (hi - lo) // 2
        # median-of-three pivot dodges the sorted-input worst case
        if a[mid] < a[lo]:
            _swap(a, mid, lo)
        if a[hi] < a[lo]:
            _swap(a, hi, lo)
        if a[hi] < a[mid]:
            _swap(a, hi, mid)
        pivot = a[mid]
        i = lo
        j = hi
        while i <= j:
            while a[i] < pivot:
                i += 1
            while a[j] > pivot:
                j -= 1
            if i <= j:
                _swap(a, i, j)
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            break
    return a[k]


cdef void _topk_largest_pair(double[::1] key, double[::1] val,
                             Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    """Rearrange both arrays so the k largest keys sit in slots 0..k-1."""
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j, mid, target = k - 1
    cdef double pivot
    while lo < hi:
        mid = lo + (hi - lo) // 2
        # descending median-of-three
        if key[mid] > key[lo]:
            _swap(key, mid, lo); _swap(val, mid, lo)
        if key[hi] > key[lo]:
            _swap(key, hi, lo); _swap(val, hi, lo)
        if key[hi] > key[mid]:
            _swap(key, hi, mid); _swap(val, hi, mid)
        pivot = key[mid]
        i = lo
        j = hi
        while i <= j:
            while key[i] > pivot:
                i += 1
            while key[j] < pivot:
                j -= 1
            if i <= j:
                _swap(key, i, j)
                _swap(val, i, j)
                i += 1
                j -= 1
        if target <= j:
            hi = j
        elif target >= i:
            lo = i
        else:
            break


cdef inline void _sift_down_max(double[::1] h, Py_ssize_t off, Py_ssize_t k,
                                Py_ssize_t i) noexcept nogil:
    """Restore the max-heap property of h[off..off+k) below slot i."""
    cdef Py_ssize_t child
    cdef double v = h[off + i]
    while True:
        child = 2 * i + 1
        if child >= k:
            break
        if child + 1 < k and h[off + child + 1] > h[off + child]:
            child += 1
        if h[off + child] <= v:
            break
        h[off + i] = h[off + child]
        i = child
    h[off + i] = v


cdef inline void _pair_sift_down_min(double[::1] key, double[::1] val,
                                     Py_ssize_t off, Py_ssize_t k,
                                     Py_ssize_t i) noexcept nogil:
    """Min-heap on key[off..off+k), carrying val along."""
    cdef Py_ssize_t child
    cdef double kv = key[off + i], vv = val[off + i]
    while True:
        child = 2 * i + 1
        if child >= k:
            break
        if child + 1 < k and key[off + child + 1] < key[off + child]:
            child += 1
        if key[off + child] >= kv:
            break
        key[off + i] = key[off + child]
        val[off + i] = val[off + child]
        i = child
    key[off + i] = kv
    val[off + i] = vv


def mean_weighted_similarity(const double[:, ::1] queries,
                             const double[:, ::1] bank,
                             const double[::1] weights,
                             double[::1] centroid, double[::1] out):
    # linear in the bank rows, so fold them into one weighted centroid and
    # finish with a single mat-vec: O((n+m)d) instead of O(nmd)
    cdef Py_ssize_t n = queries.shape[0], m = bank.shape[0], d = queries.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double *cen
    cdef const double *row
    cdef double w
    with nogil:
        cen = &centroid[0]
        for t in range(d):
            cen[t] = 0.0
        for j in range(m):
            row = &bank[j, 0]
            w = weights[j]
            for t in range(d):
                cen[t] += w * row[t]
        for i in range(n):
            out[i] = refd_dot(&queries[i, 0], cen, d) / m


def kth_neighbor_distance(const double[:, ::1] queries,
                          const double[:, ::1] bank,
                          Py_ssize_t k, double[::1] scratch, double[::1] out):
    cdef Py_ssize_t n = queries.shape[0], m = bank.shape[0], d = queries.shape[1]
    cdef Py_ssize_t i0, nq, q, off, i, j, idx
    cdef double s
    cdef const double *brow
    if k <= HEAP_MAX_K and 2 * k <= m:
        # query q of the block keeps its heap at scratch[q*k .. (q+1)*k)
        with nogil:
            i0 = 0
            while i0 < n:
                nq = n - i0
                if nq > QBLOCK:
                    nq = QBLOCK
                for q in range(nq):
                    off = q * k
                    for j in range(k):
                        scratch[off + j] = refd_sqdist(&queries[i0 + q, 0],
                                                   &bank[j, 0], d)
                    for idx in range(k // 2 - 1, -1, -1):
                        _sift_down_max(scratch, off, k, idx)
                for j in range(k, m):
                    brow = &bank[j, 0]
                    for q in range(nq):
                        off = q * k
                        s = refd_sqdist(&queries[i0 + q, 0], brow, d)
                        if s < scratch[off]:
                            scratch[off] = s
                            _sift_down_max(scratch, off, k, 0)
                for q in range(nq):
                    out[i0 + q] = sqrt(scratch[q * k])
                i0 += nq
    else:
        with nogil:
            for i in range(n):
                for j in range(m):
                    scratch[j] = refd_sqdist(&queries[i, 0], &bank[j, 0], d)
                out[i] = sqrt(_kth_smallest(scratch, m, k - 1))


def topk_weighted_similarity_mean(const double[:, ::1] queries,
                                  const double[:, ::1] bank,
                                  const double[::1] weights, Py_ssize_t k,
                                  double[::1] sim_scratch,
                                  double[::1] val_scratch, double[::1] out):
    cdef Py_ssize_t n = queries.shape[0], m = bank.shape[0], d = queries.shape[1]
    cdef Py_ssize_t i0, nq, q, off, i, j, idx
    cdef double dot, acc
    cdef const double *brow
    if k == m:
        # out rows double as the accumulators for the query block
        with nogil:
            i0 = 0
            while i0 < n:
                nq = n - i0
                if nq > QBLOCK:
                    nq = QBLOCK
                for q in range(nq):
                    out[i0 + q] = 0.0
                for j in range(m):
                    brow = &bank[j, 0]
                    for q in range(nq):
                        out[i0 + q] += weights[j] * refd_dot(&queries[i0 + q, 0],
                                                         brow, d)
                for q in range(nq):
                    out[i0 + q] /= k
                i0 += nq
    elif k <= HEAP_MAX_K:
        # query q of the block keeps its heap at slots [q*k .. (q+1)*k)
        with nogil:
            i0 = 0
            while i0 < n:
                nq = n - i0
                if nq > QBLOCK:
                    nq = QBLOCK
                for q in range(nq):
                    off = q * k
                    for j in range(k):
                        dot = refd_dot(&queries[i0 + q, 0], &bank[j, 0], d)
                        sim_scratch[off + j] = dot
                        val_scratch[off + j] = weights[j] * dot
                    for idx in range(k // 2 - 1, -1, -1):
                        _pair_sift_down_min(sim_scratch, val_scratch, off, k,
                                            idx)
                for j in range(k, m):
                    brow = &bank[j, 0]
                    for q in range(nq):
                        off = q * k
                        dot = refd_dot(&queries[i0 + q, 0], brow, d)
                        if dot > sim_scratch[off]:
                            sim_scratch[off] = dot
                            val_scratch[off] = weights[j] * dot
                            _pair_sift_down_min(sim_scratch, val_scratch, off,
                                                k, 0)
                for q in range(nq):
                    off = q * k
                    acc = 0.0
                    for j in range(k):
                        acc += val_scratch[off + j]
                    out[i0 + q] = acc / k
                i0 += nq
    else:
        with nogil:
            for i in range(n):
                for j in range(m):
                    dot = refd_dot(&queries[i, 0], &bank[j, 0], d)
                    sim_scratch[j] = dot
                    val_scratch[j] = weights[j] * dot
                _topk_largest_pair(sim_scratch, val_scratch, m, k)
                acc = 0.0
                for j in range(k):
                    acc += val_scratch[j]
                out[i] = acc / k
