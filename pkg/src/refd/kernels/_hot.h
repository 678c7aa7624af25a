/* Element kernels for the compiled backend.
 *
 * These live in plain C rather than Cython so the compiler sees restrict-
 * qualified pointers and an explicit simd reduction license; the memoryview
 * versions of these loops fail gcc's vectorization cost model behind the
 * aliasing checks it has to insert. The pragmas need -fopenmp-simd (no
 * runtime library); compilers that ignore them still produce correct
 * scalar code.
 *
 * Reassociating the sums is safe for this package's guarantees: identical
 * rows give all-zero terms, and a sum of zeros is exactly 0.0 in any
 * order.
 */

#ifndef REFD_KERNELS_HOT_H
#define REFD_KERNELS_HOT_H

#include <stddef.h>

static inline double refd_dot(const double *restrict a,
                              const double *restrict b, ptrdiff_t d)
{
    double s = 0.0;
    ptrdiff_t t;
#pragma omp simd reduction(+ : s)
    for (t = 0; t < d; ++t)
        s += a[t] * b[t];
    return s;
}

static inline double refd_sqdist(const double *restrict a,
                                 const double *restrict b, ptrdiff_t d)
{
    double s = 0.0;
    ptrdiff_t t;
#pragma omp simd reduction(+ : s)
    for (t = 0; t < d; ++t) {
        /* direct differences, never |a|^2+|b|^2-2ab: identical rows must
         * come out exactly 0.0 */
        double diff = a[t] - b[t];
        s += diff * diff;
    }
    return s;
}

#endif
