# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: patch extraction for convolution and token edit distance."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _valid_span(Py_ssize_t j, Py_ssize_t pad, Py_ssize_t stride, Py_ssize_t W,
                             Py_ssize_t wo, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns ox with 0 <= ox*stride + j - pad < W
    cdef Py_ssize_t first = pad - j
    lo[0] = 0 if first <= 0 else (first + stride - 1) // stride
    cdef Py_ssize_t last = W - 1 + pad - j
    hi[0] = 0 if last < 0 else min(wo, last // stride + 1)
    if hi[0] < lo[0]:
        hi[0] = lo[0]


def _im2col(real[:, :, :, ::1] x, real[:, ::1] cols, int kh, int kw, int stride, int pad,
            int ho, int wo):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, i, j, oy, ox, row, iy, lo, hi
    cdef Py_ssize_t P = ho * wo
    cdef real* dst
    cdef real* src
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    _valid_span(j, pad, stride, W, wo, &lo, &hi)
                    for b in range(B):
                        dst = &cols[row, b * P]
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                for ox in range(wo):
                                    dst[ox] = 0
                            else:
                                src = &x[b, c, iy, 0] + (j - pad)
                                for ox in range(lo):
                                    dst[ox] = 0
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        dst[ox] = src[ox]
                                else:
                                    for ox in range(lo, hi):
                                        dst[ox] = src[ox * stride]
                                for ox in range(hi, wo):
                                    dst[ox] = 0
                            dst += wo


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] dx, int kh, int kw, int stride, int pad,
            int ho, int wo):
    cdef Py_ssize_t B = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef Py_ssize_t b, c, i, j, oy, ox, row, iy, lo, hi
    cdef Py_ssize_t P = ho * wo
    cdef real* src
    cdef real* dst
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    _valid_span(j, pad, stride, W, wo, &lo, &hi)
                    for b in range(B):
                        src = &cols[row, b * P]
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if 0 <= iy < H:
                                dst = &dx[b, c, iy, 0] + (j - pad)
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        dst[ox] += src[ox]
                                else:
                                    for ox in range(lo, hi):
                                        dst[ox * stride] += src[ox]
                            src += wo


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    cdef int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int ho = (H + 2 * pad - kh) // stride + 1
    cdef int wo = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((C * kh * kw, B * ho * wo), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad, ho, wo)
    return cols


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    B, C, H, W = shape
    cdef int ho = (H + 2 * pad - kh) // stride + 1
    cdef int wo = (W + 2 * pad - kw) // stride + 1
    dx = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, dx, kh, kw, stride, pad, ho, wo)
    return dx


def levenshtein(a, b):
    cdef cnp.int64_t[::1] s = np.ascontiguousarray(a, dtype=np.int64)
    cdef cnp.int64_t[::1] t = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t n = s.shape[0], m = t.shape[0], i, j
    if n == 0:
        return m
    if m == 0:
        return n
    cdef cnp.int64_t[::1] prev = np.arange(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] cur = np.empty(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] tmp
    cdef cnp.int64_t best, v
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if s[i - 1] == t[j - 1] else 1)
            v = prev[j] + 1
            if v < best:
                best = v
            v = cur[j - 1] + 1
            if v < best:
                best = v
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
