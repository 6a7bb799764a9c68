# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch extraction/scatter for 2-D convolutions.

``col2im`` accumulates in the same order as the numpy fallback so both
produce bit-identical sums.
"""
import numpy as np

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] x, real[:, ::1] cols, int kh, int kw,
            int stride, int pad, int oh, int ow):
    cdef Py_ssize_t n, c, i, j, a, b, row, col
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t y, xx
    with nogil:
        for n in range(N):
            for a in range(oh):
                for b in range(ow):
                    row = (n * oh + a) * ow + b
                    for c in range(C):
                        for i in range(kh):
                            y = a * stride + i - pad
                            for j in range(kw):
                                xx = b * stride + j - pad
                                col = (c * kh + i) * kw + j
                                if 0 <= y < H and 0 <= xx < W:
                                    cols[row, col] = x[n, c, y, xx]
                                else:
                                    cols[row, col] = 0


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] out, int kh, int kw,
            int stride, int pad, int oh, int ow):
    # Per output element, contributions arrive in descending (i, j) order.
    cdef Py_ssize_t n, c, i, j, a, b, row, col
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t y, xx
    with nogil:
        for n in range(N):
            for a in range(oh):
                for b in range(ow):
                    row = (n * oh + a) * ow + b
                    for c in range(C):
                        for i in range(kh):
                            y = a * stride + i - pad
                            if y < 0 or y >= H:
                                continue
                            for j in range(kw):
                                xx = b * stride + j - pad
                                if 0 <= xx < W:
                                    out[n, c, y, xx] += cols[row, (c * kh + i) * kw + j]


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    N, C, H, W = x.shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((N * oh * ow, C * kh * kw), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad, oh, ow)
    return cols


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    N, C, H, W = shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, C, H, W), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, pad, oh, ow)
    return out
