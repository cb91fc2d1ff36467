# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics must match alrao._pykernels exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, INFINITY

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1
    cdef Py_ssize_t b, ch, i, j, p, q, col
    out = np.empty((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t row
    for b in range(n):
        for p in range(oh):
            for q in range(ow):
                row = (b * oh + p) * ow + q
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            o[row, col] = x[b, ch, p + i, q + j]
                            col += 1
    return out


def col2im(const double[:, ::1] cols, tuple shape, int kh, int kw):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1
    cdef Py_ssize_t b, ch, i, j, p, q, col
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    # per-pixel accumulation order is (i, j) lexicographic, same as the numpy path
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    col = (ch * kh + i) * kw + j
                    for p in range(oh):
                        for q in range(ow):
                            dx[b, ch, p + i, q + j] += cols[(b * oh + p) * ow + q, col]
    return out


cdef double _lse(const double[::1] v, const double[::1] u):
    cdef Py_ssize_t k, m = v.shape[0]
    cdef double mx = -INFINITY, s = 0.0
    for k in range(m):
        if v[k] > mx:
            mx = v[k]
        if u[k] > mx:
            mx = u[k]
    if mx == -INFINITY:
        return mx
    for k in range(m):
        s += exp(v[k] - mx) + exp(u[k] - mx)
    return mx + log(s)


def switch_step(const double[::1] log_wa, const double[::1] log_wb,
                const double[::1] log_lik, long t, double theta):
    cdef Py_ssize_t k, m = log_wa.shape[0]
    cdef double sigma = 1.0 / (t + 1.0)
    cdef double log_pi = -log(<double>m)
    cdef double mx = -INFINITY, s = 0.0, log_pool, z, x, y
    new_a = np.empty(m, dtype=np.float64)
    new_b = np.empty(m, dtype=np.float64)
    cdef double[::1] a = new_a
    cdef double[::1] b = new_b
    for k in range(m):
        a[k] = log_wa[k] + log_lik[k]
        b[k] = log_wb[k] + log_lik[k]
        if a[k] > mx:
            mx = a[k]
    if mx == -INFINITY:
        log_pool = -INFINITY
    else:
        for k in range(m):
            s += exp(a[k] - mx)
        log_pool = log(sigma) + mx + log(s)
    for k in range(m):
        x = a[k] + log1p(-sigma)
        y = log_pool + log(theta) + log_pi
        a[k] = _logaddexp(x, y)
        y = log_pool + log1p(-theta) + log_pi
        b[k] = _logaddexp(b[k], y)
    z = _lse(a, b)
    for k in range(m):
        a[k] -= z
        b[k] -= z
    return new_a, new_b


cdef inline double _logaddexp(double x, double y):
    cdef double mx
    if x == -INFINITY:
        return y
    if y == -INFINITY:
        return x
    mx = x if x > y else y
    return mx + log(exp(x - mx) + exp(y - mx))
