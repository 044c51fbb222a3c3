# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled elementwise kernels.

Each routine must reproduce ``_fallback`` bit for bit; the arithmetic below
follows the same operation order as the numpy expressions there.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport nearbyint

cnp.import_array()


def residual_relu(const double[:, ::1] x_prev, const double[:, ::1] z, double coef):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1], i, j
    cdef double v
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                v = z[i, j]
                if v <= 0.0:
                    v = 0.0
                o[i, j] = x_prev[i, j] + coef * v
    return out


def scaled_relu(const double[:, ::1] z, double coef):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1], i, j
    cdef double v
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                v = z[i, j]
                if v <= 0.0:
                    v = 0.0
                o[i, j] = coef * v
    return out


def relu_backward(const double[:, ::1] delta, const double[:, ::1] z, double coef):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = coef * delta[i, j] if z[i, j] > 0.0 else 0.0
    return out


def sgd_step(double[::1] w, const double[::1] g, double eta):
    cdef Py_ssize_t k, n = w.shape[0]
    with nogil:
        for k in range(n):
            w[k] = w[k] - eta * g[k]


def mean_of(list arrays):
    """``x0 + sum(x_v - x0) / k``: exact whenever all inputs agree."""
    cdef Py_ssize_t count = len(arrays), k, n, r
    cdef const double[::1] src
    first = np.ascontiguousarray(arrays[0], dtype=np.float64).ravel()
    out = first.copy()
    if count == 1:
        return out
    cdef const double[::1] base = first
    cdef double[::1] res = out
    n = res.shape[0]
    acc_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] acc = acc_arr
    for r in range(1, count):
        src = np.ascontiguousarray(arrays[r], dtype=np.float64).ravel()
        with nogil:
            for k in range(n):
                acc[k] = acc[k] + (src[k] - base[k])
    cdef double denom = <double>count
    with nogil:
        for k in range(n):
            res[k] = base[k] + acc[k] / denom
    return out


def quantize_codes(const double[::1] values, double lo, double step, int bits):
    cdef Py_ssize_t k, n = values.shape[0]
    cdef double top = <double>((1 << bits) - 1), c
    codes = np.zeros(n, dtype=np.uint32)
    cdef cnp.uint32_t[::1] out = codes
    if step == 0.0:
        return codes
    with nogil:
        for k in range(n):
            c = nearbyint((values[k] - lo) / step)
            if c < 0.0:
                c = 0.0
            elif c > top:
                c = top
            out[k] = <cnp.uint32_t>c
    return codes


def dequantize_codes(const cnp.uint32_t[::1] codes, double lo, double step):
    cdef Py_ssize_t k, n = codes.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for k in range(n):
            o[k] = lo + <double>codes[k] * step
    return out
