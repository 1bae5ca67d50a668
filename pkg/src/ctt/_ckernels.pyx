# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter kernels for convolution and 2x2 max pooling.

Matrix products stay in BLAS; these routines only cover the index-heavy
loops (patch extraction, patch accumulation, window max and its scatter)
that numpy can only express through strided copies or ``np.add.at``.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


cdef inline (Py_ssize_t, Py_ssize_t) _valid_range(Py_ssize_t v, Py_ssize_t pad,
                                                  Py_ssize_t stride, Py_ssize_t w,
                                                  Py_ssize_t wo) nogil:
    """Output columns j whose input column j*stride + v - pad lies in [0, w)."""
    cdef Py_ssize_t lo = 0, hi
    if pad > v:
        lo = (pad - v + stride - 1) // stride
    hi = (w - 1 + pad - v) // stride + 1 if w - 1 + pad - v >= 0 else 0
    if hi > wo:
        hi = wo
    if hi < lo:
        hi = lo
    return lo, hi


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    """Patches of ``x`` as an array of shape (C*k*k, N*Ho*Wo)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t p = ho * wo
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((c * k * k, n * p), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t b, ch, u, v, i, j, row, hi, j0, j1
    cdef floating* dst
    cdef const floating* src
    if out_arr.size == 0:
        return out_arr
    with nogil:
        for ch in range(c):
            for u in range(k):
                for v in range(k):
                    row = (ch * k + u) * k + v
                    j0, j1 = _valid_range(v, pad, stride, w, wo)
                    for b in range(n):
                        for i in range(ho):
                            hi = i * stride + u - pad
                            if hi < 0 or hi >= h or j1 <= j0:
                                continue
                            # raw row pointers let the copy vectorise
                            dst = &out[row, b * p + i * wo]
                            src = &x[b, ch, hi, 0] + v - pad
                            if stride == 1:
                                for j in range(j0, j1):
                                    dst[j] = src[j]
                            else:
                                for j in range(j0, j1):
                                    dst[j] = src[j * stride]
    return out_arr


def col2im(floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, int k, int stride, int pad):
    """Adjoint of :func:`im2col`: accumulate patch columns back into (N, C, H, W)."""
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t p = ho * wo
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, u, v, i, j, row, col, hi, j0, j1
    for b in range(n):
        for ch in range(c):
            for u in range(k):
                for v in range(k):
                    row = (ch * k + u) * k + v
                    j0, j1 = _valid_range(v, pad, stride, w, wo)
                    for i in range(ho):
                        hi = i * stride + u - pad
                        if hi < 0 or hi >= h:
                            continue
                        col = b * p + i * wo
                        for j in range(j0, j1):
                            out[b, ch, hi, j * stride + v - pad] += cols[row, col + j]
    return out_arr


def maxpool2x2_forward(floating[:, :, :, ::1] x):
    """Window max and flat in-window argmax (0..3, first index wins ties)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef floating best, val
    cdef signed char arg
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, 2 * i, 2 * j]
                    arg = 0
                    val = x[b, ch, 2 * i, 2 * j + 1]
                    if val > best:
                        best = val
                        arg = 1
                    val = x[b, ch, 2 * i + 1, 2 * j]
                    if val > best:
                        best = val
                        arg = 2
                    val = x[b, ch, 2 * i + 1, 2 * j + 1]
                    if val > best:
                        best = val
                        arg = 3
                    out[b, ch, i, j] = best
                    idx[b, ch, i, j] = arg
    return out_arr, idx_arr


def maxpool2x2_backward(floating[:, :, :, ::1] grad, signed char[:, :, :, ::1] idx):
    """Route each window gradient to its argmax position."""
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, c, 2 * ho, 2 * wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j
    cdef signed char a
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    a = idx[b, ch, i, j]
                    out[b, ch, 2 * i + (a >> 1), 2 * j + (a & 1)] = grad[b, ch, i, j]
    return out_arr
