# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im. Same layout and accumulation order as _kernels_py."""
import numpy as np
cimport cython

ctypedef fused real:
    float
    double


cdef inline void _span(Py_ssize_t wo, Py_ssize_t w, Py_ssize_t j, int stride, int pad,
                       Py_ssize_t* lo, Py_ssize_t* hi) nogil:
    # output columns xx whose source column xx*stride + j - pad lies in [0, w)
    cdef Py_ssize_t a = 0, b = wo
    while a < wo and a * stride + j - pad < 0:
        a += 1
    while b > a and (b - 1) * stride + j - pad >= w:
        b -= 1
    lo[0] = a
    hi[0] = b


def _im2col(real[:, :, :, ::1] x, real[:, :, :, :, :, ::1] cols,
            int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = cols.shape[4], wo = cols.shape[5]
    cdef Py_ssize_t ci, i, j, b, y, xx, sy, lo, hi, off
    cdef real* dst
    cdef real* src
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    _span(wo, w, j, stride, pad, &lo, &hi)
                    off = j - pad
                    for b in range(n):
                        for y in range(ho):
                            dst = &cols[ci, i, j, b, y, 0]
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                for xx in range(wo):
                                    dst[xx] = 0
                                continue
                            src = &x[b, ci, sy, 0]
                            for xx in range(lo):
                                dst[xx] = 0
                            for xx in range(lo, hi):
                                dst[xx] = src[xx * stride + off]
                            for xx in range(hi, wo):
                                dst[xx] = 0


def _col2im(real[:, :, :, :, :, ::1] cols, real[:, :, :, ::1] out,
            int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t ho = cols.shape[4], wo = cols.shape[5]
    cdef Py_ssize_t ci, i, j, b, y, xx, sy, lo, hi, off
    cdef real* dst
    cdef real* src
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    _span(wo, w, j, stride, pad, &lo, &hi)
                    off = j - pad
                    for b in range(n):
                        for y in range(ho):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            src = &cols[ci, i, j, b, y, 0]
                            dst = &out[b, ci, sy, 0]
                            for xx in range(lo, hi):
                                dst[xx * stride + off] += src[xx]


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    n, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.ascontiguousarray(cols).reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, pad)
    return out
