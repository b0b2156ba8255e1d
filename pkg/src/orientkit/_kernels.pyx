# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tap gather / scatter for the quadrature correlations.

For every output bin ``(c, i, j, k)``::

    out[c, i, j, k] = sum_{d, b, t} W[j, d, b, t] * V[c, idx]
    idx = ((A[j, d, b, t] - k) mod n) * stride_a + base[j, d, b, t] + (i + d) mod n

``scatter`` is the exact adjoint. Work is split over channels only, so the
reduction order inside a channel never depends on the thread count.
"""
import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.stdlib cimport calloc, free

cnp.import_array()


def gather(const double[:, ::1] V,
           const int[:, :, :, ::1] A,
           const long long[:, :, :, ::1] base,
           const double[:, :, :, ::1] W,
           long long stride_a,
           int num_threads=1):
    cdef Py_ssize_t C = V.shape[0]
    cdef int n = A.shape[0]
    cdef int T = A.shape[3]
    out_arr = np.zeros((C, n, n, n), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c
    with nogil:
        for c in prange(C, num_threads=num_threads, schedule="static"):
            _gather_channel(&V[c, 0], A, base, W, stride_a, out, c, n, T)
    return out_arr


cdef void _gather_channel(const double* vc,
                          const int[:, :, :, ::1] A,
                          const long long[:, :, :, ::1] base,
                          const double[:, :, :, ::1] W,
                          long long stride_a,
                          double[:, :, :, ::1] out,
                          Py_ssize_t c, int n, int T) noexcept nogil:
    cdef int j, d, b, t, k, i, a, a0, split
    cdef double w
    cdef const double* row
    cdef double* acc = <double*> calloc(n * n, sizeof(double))
    cdef double* ak
    for j in range(n):
        for i in range(n * n):
            acc[i] = 0.0
        for d in range(n):
            split = n - d
            for b in range(n):
                for t in range(T):
                    w = W[j, d, b, t]
                    if w == 0.0:
                        continue
                    a0 = A[j, d, b, t]
                    for k in range(n):
                        a = a0 - k
                        if a < 0:
                            a = a + n
                        row = vc + a * stride_a + base[j, d, b, t]
                        ak = acc + k * n
                        for i in range(split):
                            ak[i] += w * row[i + d]
                        for i in range(split, n):
                            ak[i] += w * row[i - split]
        for k in range(n):
            for i in range(n):
                out[c, i, j, k] = acc[k * n + i]
    free(acc)


def scatter(const double[:, :, :, ::1] dout,
            const int[:, :, :, ::1] A,
            const long long[:, :, :, ::1] base,
            const double[:, :, :, ::1] W,
            long long stride_a,
            long long size,
            int num_threads=1):
    cdef Py_ssize_t C = dout.shape[0]
    cdef int n = A.shape[0]
    cdef int T = A.shape[3]
    dv_arr = np.zeros((C, size), dtype=np.float64)
    cdef double[:, ::1] dv = dv_arr
    cdef Py_ssize_t c
    with nogil:
        for c in prange(C, num_threads=num_threads, schedule="static"):
            _scatter_channel(dout, A, base, W, stride_a, &dv[c, 0], c, n, T)
    return dv_arr


cdef void _scatter_channel(const double[:, :, :, ::1] dout,
                           const int[:, :, :, ::1] A,
                           const long long[:, :, :, ::1] base,
                           const double[:, :, :, ::1] W,
                           long long stride_a,
                           double* vc,
                           Py_ssize_t c, int n, int T) noexcept nogil:
    cdef int j, d, b, t, k, i, a, a0, split
    cdef double w
    cdef double* row
    cdef double* g = <double*> calloc(n * n, sizeof(double))
    cdef double* gk
    for j in range(n):
        for k in range(n):
            for i in range(n):
                g[k * n + i] = dout[c, i, j, k]
        for d in range(n):
            split = n - d
            for b in range(n):
                for t in range(T):
                    w = W[j, d, b, t]
                    if w == 0.0:
                        continue
                    a0 = A[j, d, b, t]
                    for k in range(n):
                        a = a0 - k
                        if a < 0:
                            a = a + n
                        row = vc + a * stride_a + base[j, d, b, t]
                        gk = g + k * n
                        for i in range(split):
                            row[i + d] += w * gk[i]
                        for i in range(split, n):
                            row[i - split] += w * gk[i]
    free(g)
