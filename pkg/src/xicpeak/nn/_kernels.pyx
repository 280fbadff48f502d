# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled depthwise convolution kernels (hot inner loops of the conv projections).

The kernel tap `j` is the outer loop so the inner loop is a long stride-1
sweep over time that the compiler can vectorize.
"""

import numpy as np

cimport cython
cimport numpy as cnp

BACKEND = "cython"

ctypedef fused floating:
    float
    double


def dwconv_forward(floating[:, :, ::1] x, floating[:, ::1] w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], T = x.shape[2], K = w.shape[1]
    cdef Py_ssize_t pad = (K - 1) // 2
    cdef Py_ssize_t b, c, t, j, off, lo, hi
    cdef floating wj
    if floating is float:
        y_arr = np.zeros((B, C, T), dtype=np.float32)
    else:
        y_arr = np.zeros((B, C, T), dtype=np.float64)
    cdef floating[:, :, ::1] y = y_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for j in range(K):
                    wj = w[c, j]
                    off = j - pad
                    lo = -off if off < 0 else 0
                    hi = T - off if off > 0 else T
                    for t in range(lo, hi):
                        y[b, c, t] += wj * x[b, c, t + off]
    return y_arr


def dwconv_backward(floating[:, :, ::1] x, floating[:, ::1] w, floating[:, :, ::1] dy):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], T = x.shape[2], K = w.shape[1]
    cdef Py_ssize_t pad = (K - 1) // 2
    cdef Py_ssize_t b, c, t, j, off, lo, hi
    cdef floating wj, acc
    if floating is float:
        dx_arr = np.zeros((B, C, T), dtype=np.float32)
        dw_arr = np.zeros((C, K), dtype=np.float32)
    else:
        dx_arr = np.zeros((B, C, T), dtype=np.float64)
        dw_arr = np.zeros((C, K), dtype=np.float64)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef floating[:, ::1] dw = dw_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for j in range(K):
                    wj = w[c, j]
                    off = j - pad
                    lo = -off if off < 0 else 0
                    hi = T - off if off > 0 else T
                    acc = 0
                    for t in range(lo, hi):
                        dx[b, c, t + off] += wj * dy[b, c, t]
                        acc += dy[b, c, t] * x[b, c, t + off]
                    dw[c, j] += acc
    return dx_arr, dw_arr
