# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Same contracts as ``_pykernels``; fused C loops avoid the temporary
arrays and dispatch overhead that dominate numpy on the small matrices
this package works with (tens of rows, d <= 256).
"""

from libc.math cimport exp, sqrt

import numpy as np

BACKEND = "cython"


cdef void _softmax_inplace(double[:] row) noexcept nogil:
    cdef Py_ssize_t n = row.shape[0]
    cdef Py_ssize_t i
    cdef double m = row[0]
    cdef double total = 0.0
    for i in range(1, n):
        if row[i] > m:
            m = row[i]
    for i in range(n):
        row[i] = exp(row[i] - m)
        total += row[i]
    for i in range(n):
        row[i] /= total


def softmax_vec(double[::1] x):
    """Stable softmax of a 1-D vector (max is subtracted before exp)."""
    out = np.array(x, dtype=np.float64)
    cdef double[:] view = out
    _softmax_inplace(view)
    return out


def softmax_rows(double[:, ::1] m):
    """Row-wise stable softmax of a 2-D array."""
    out = np.array(m, dtype=np.float64)
    cdef double[:, :] view = out
    cdef Py_ssize_t r
    for r in range(view.shape[0]):
        _softmax_inplace(view[r])
    return out


def sdpa(double[:, ::1] q, double[:, ::1] k, double[:, ::1] v):
    """Fused scaled dot-product attention; returns (output, weights)."""
    cdef Py_ssize_t nq = q.shape[0]
    cdef Py_ssize_t dk = q.shape[1]
    cdef Py_ssize_t m = k.shape[0]
    cdef Py_ssize_t dv = v.shape[1]
    cdef double scale = 1.0 / sqrt(<double> dk)

    weights_arr = np.empty((nq, m), dtype=np.float64)
    out_arr = np.zeros((nq, dv), dtype=np.float64)
    cdef double[:, :] weights = weights_arr
    cdef double[:, :] out = out_arr

    cdef Py_ssize_t i, j, t
    cdef double acc, w
    with nogil:
        for i in range(nq):
            for j in range(m):
                acc = 0.0
                for t in range(dk):
                    acc += q[i, t] * k[j, t]
                weights[i, j] = acc * scale
            _softmax_inplace(weights[i])
            for j in range(m):
                w = weights[i, j]
                for t in range(dv):
                    out[i, t] += w * v[j, t]
    return out_arr, weights_arr


def attention_pool(double[:, ::1] h, double[::1] u):
    """Softmax-weighted pooling of token rows; returns (pooled, alpha)."""
    cdef Py_ssize_t m = h.shape[0]
    cdef Py_ssize_t d = h.shape[1]
    alpha_arr = np.empty(m, dtype=np.float64)
    pooled_arr = np.zeros(d, dtype=np.float64)
    cdef double[:] alpha = alpha_arr
    cdef double[:] pooled = pooled_arr

    cdef Py_ssize_t i, t
    cdef double acc
    with nogil:
        for i in range(m):
            acc = 0.0
            for t in range(d):
                acc += h[i, t] * u[t]
            alpha[i] = acc
        _softmax_inplace(alpha)
        for i in range(m):
            acc = alpha[i]
            for t in range(d):
                pooled[t] += acc * h[i, t]
    return pooled_arr, alpha_arr
