# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: dense layer forward/backward, relu, softmax cross-entropy.

Semantics match numpy_backend exactly; loops are ordered so accumulation
happens over the contraction index innermost-to-outermost the same way a
row-major dot product does.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def dense_forward(cnp.float64_t[:, ::1] x, cnp.float64_t[:, ::1] w, b):
    cdef Py_ssize_t n = x.shape[0], d_in = x.shape[1], d_out = w.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, d_out))
    cdef cnp.float64_t[:, ::1] y = out
    cdef cnp.float64_t[::1] bias
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(n):
        for j in range(d_out):
            acc = 0.0
            for k in range(d_in):
                acc += x[i, k] * w[k, j]
            y[i, j] = acc
    if b is not None:
        bias = b
        for i in range(n):
            for j in range(d_out):
                y[i, j] += bias[j]
    return out


def dense_backward(cnp.float64_t[:, ::1] x, cnp.float64_t[:, ::1] w,
                   cnp.float64_t[:, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], d_in = x.shape[1], d_out = w.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gx_arr = np.zeros((n, d_in))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gw_arr = np.zeros((d_in, d_out))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gb_arr = np.zeros(d_out)
    cdef cnp.float64_t[:, ::1] gx = gx_arr
    cdef cnp.float64_t[:, ::1] gw = gw_arr
    cdef cnp.float64_t[::1] gb = gb_arr
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(n):
        for k in range(d_in):
            acc = 0.0
            for j in range(d_out):
                acc += gy[i, j] * w[k, j]
            gx[i, k] = acc
    for k in range(d_in):
        for j in range(d_out):
            acc = 0.0
            for i in range(n):
                acc += x[i, k] * gy[i, j]
            gw[k, j] = acc
    for j in range(d_out):
        acc = 0.0
        for i in range(n):
            acc += gy[i, j]
        gb[j] = acc
    return gx_arr, gw_arr, gb_arr


def relu_forward(cnp.float64_t[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, d))
    cdef cnp.float64_t[:, ::1] y = out
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(d):
            y[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out


def relu_backward(cnp.float64_t[:, ::1] x_pre, cnp.float64_t[:, ::1] gy):
    cdef Py_ssize_t n = x_pre.shape[0], d = x_pre.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, d))
    cdef cnp.float64_t[:, ::1] gx = out
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(d):
            gx[i, j] = gy[i, j] if x_pre[i, j] > 0.0 else 0.0
    return out


def softmax_xent(cnp.float64_t[:, ::1] logits, cnp.int64_t[::1] labels):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dl_arr = np.zeros((n, c))
    cdef cnp.float64_t[:, ::1] dl = dl_arr
    cdef Py_ssize_t i, j
    cdef double m, s, loss = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(c):
            dl[i, j] = exp(logits[i, j] - m)
            s += dl[i, j]
        loss -= (logits[i, labels[i]] - m) - log(s)
        for j in range(c):
            dl[i, j] /= s
        dl[i, labels[i]] -= 1.0
        for j in range(c):
            dl[i, j] /= n
    return loss / n, dl_arr
