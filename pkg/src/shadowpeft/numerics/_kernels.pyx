# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernels for the row-wise hot loops.

Each function mirrors the numpy version in ``_kernels_py`` one for one.
Inputs must be C-contiguous; the dispatch layer guarantees that.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double mean, var, r, c
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <floating>r
            for j in range(d):
                c = (x[i, j] - mean) * r
                xhat[i, j] = <floating>c
                y[i, j] = <floating>(c * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(floating[:, ::1] gy, floating[:, ::1] xhat, floating[::1] rstd, floating[::1] gamma):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    dx_arr = np.empty((n, d), dtype=dtype)
    dg_arr = np.zeros(d, dtype=np.float64)
    db_arr = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef double m1, m2, gx
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gx = gy[i, j] * gamma[j]
                m1 += gx
                m2 += gx * xhat[i, j]
                dg[j] += gy[i, j] * xhat[i, j]
                db[j] += gy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gx = gy[i, j] * gamma[j]
                dx[i, j] = <floating>((gx - m1 - xhat[i, j] * m2) * rstd[i])
    return dx_arr, dg_arr.astype(dtype, copy=False), db_arr.astype(dtype, copy=False)


def causal_softmax_fwd(floating[:, :, ::1] s):
    cdef Py_ssize_t n = s.shape[0], T = s.shape[1], b, i, j
    dtype = np.float64 if floating is double else np.float32
    p_arr = np.zeros((n, T, s.shape[2]), dtype=dtype)
    cdef floating[:, :, ::1] p = p_arr
    cdef double m, tot, e
    with nogil:
        for b in range(n):
            for i in range(T):
                m = -INFINITY
                for j in range(i + 1):
                    if s[b, i, j] > m:
                        m = s[b, i, j]
                tot = 0.0
                for j in range(i + 1):
                    e = exp(s[b, i, j] - m)
                    p[b, i, j] = <floating>e
                    tot += e
                for j in range(i + 1):
                    p[b, i, j] = <floating>(p[b, i, j] / tot)
    return p_arr


def softmax_rows_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    p_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] p = p_arr
    cdef double m, tot, e
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            tot = 0.0
            for j in range(d):
                e = exp(x[i, j] - m)
                p[i, j] = <floating>e
                tot += e
            for j in range(d):
                p[i, j] = <floating>(p[i, j] / tot)
    return p_arr


def _softmax_bwd_2d(floating[:, ::1] p, floating[:, ::1] g):
    cdef Py_ssize_t n = p.shape[0], d = p.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * p[i, j]
            for j in range(d):
                out[i, j] = <floating>(p[i, j] * (g[i, j] - dot))
    return out_arr


def softmax_bwd(p, g):
    shape = p.shape
    d = shape[len(shape) - 1]  # wraparound is off in this module
    out = _softmax_bwd_2d(np.ascontiguousarray(p).reshape(-1, d),
                          np.ascontiguousarray(g, dtype=p.dtype).reshape(-1, d))
    return out.reshape(shape)


def _ce_fwd(floating[:, ::1] logits, cnp.int64_t[::1] targets, long ignore_index):
    cdef Py_ssize_t n = logits.shape[0], V = logits.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    probs_arr = np.empty((n, V), dtype=dtype)
    cdef floating[:, ::1] probs = probs_arr
    cdef double m, tot, e, total = 0.0
    cdef long count = 0, t
    with nogil:
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, V):
                if logits[i, j] > m:
                    m = logits[i, j]
            tot = 0.0
            for j in range(V):
                e = exp(logits[i, j] - m)
                probs[i, j] = <floating>e
                tot += e
            for j in range(V):
                probs[i, j] = <floating>(probs[i, j] / tot)
            t = targets[i]
            if t != ignore_index:
                total += log(tot) - (logits[i, t] - m)
                count += 1
    return total, count, probs_arr


def cross_entropy_fwd(logits, targets, ignore_index):
    return _ce_fwd(logits, np.ascontiguousarray(targets, dtype=np.int64), int(ignore_index))

