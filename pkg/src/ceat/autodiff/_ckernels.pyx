# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels.

Every reduction is a plain sequential loop over the row, so results are
bitwise reproducible for a given input. Inputs are 2-D C-contiguous arrays
of float32 or float64; callers reshape to (rows, width) beforehand.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, erf, M_SQRT1_2

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double INV_SQRT_2PI = 0.3989422804014327


def layernorm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], w = x.shape[1], i, j
    cdef double mean, var, diff, rstd
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, w), dtype=dtype)
    xhat_arr = np.empty((n, w), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rs = rstd_arr
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(w):
                mean += x[i, j]
            mean /= w
            var = 0.0
            for j in range(w):
                diff = x[i, j] - mean
                var += diff * diff
            var /= w
            rstd = 1.0 / sqrt(var + eps)
            rs[i] = <real>rstd
            for j in range(w):
                xhat[i, j] = <real>((x[i, j] - mean) * rstd)
                out[i, j] = <real>(xhat[i, j] * gamma[j] + beta[j])
    return out_arr, xhat_arr, rstd_arr


def layernorm_backward(real[:, ::1] gout, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = gout.shape[0], w = gout.shape[1], i, j
    cdef double s1, s2, gh
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, w), dtype=dtype)
    gg_acc = np.zeros(w, dtype=np.float64)
    gb_acc = np.zeros(w, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_acc
    cdef double[::1] gb = gb_acc
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(w):
                gh = gout[i, j] * gamma[j]
                s1 += gh
                s2 += gh * xhat[i, j]
                gg[j] += gout[i, j] * xhat[i, j]
                gb[j] += gout[i, j]
            s1 /= w
            s2 /= w
            for j in range(w):
                gh = gout[i, j] * gamma[j]
                gx[i, j] = <real>(rstd[i] * (gh - s1 - xhat[i, j] * s2))
    return gx_arr, gg_acc.astype(dtype), gb_acc.astype(dtype)


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], w = x.shape[1], i, j
    cdef double m, s, e
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, w), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, w):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(w):
                e = exp(x[i, j] - m)
                s += e
                out[i, j] = <real>e
            for j in range(w):
                out[i, j] = <real>(out[i, j] / s)
    return out_arr


def softmax_backward(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], w = y.shape[1], i, j
    cdef double dot
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, w), dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(w):
                dot += y[i, j] * gy[i, j]
            for j in range(w):
                gx[i, j] = <real>(y[i, j] * (gy[i, j] - dot))
    return gx_arr


def gelu_forward(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = <real>(0.5 * v * (1.0 + erf(v * M_SQRT1_2)))
    return out_arr


def gelu_backward(real[::1] x, real[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, cdf, pdf
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty(n, dtype=dtype)
    cdef real[::1] gx = gx_arr
    with nogil:
        for i in range(n):
            v = x[i]
            cdf = 0.5 * (1.0 + erf(v * M_SQRT1_2))
            pdf = INV_SQRT_2PI * exp(-0.5 * v * v)
            gx[i] = <real>(gy[i] * (cdf + v * pdf))
    return gx_arr
