# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels for the convolution op.

Column layout is ``[C*kh*kw, B*OH*OW]``.  Accumulation order in ``col2im``
matches the numpy fallback (kernel offset outermost, then pixels), so the two
backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t j, Py_ssize_t pad, Py_ssize_t stride) nogil:
    # first output column whose input index x*stride + j - pad is >= 0
    cdef Py_ssize_t num = pad - j
    if num <= 0:
        return 0
    return (num + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t j, Py_ssize_t pad, Py_ssize_t stride,
                           Py_ssize_t W, Py_ssize_t ow) nogil:
    # one past the last output column whose input index is < W
    cdef Py_ssize_t num = W - 1 + pad - j
    if num < 0:
        return 0
    num = num // stride + 1
    return num if num < ow else ow


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t oh = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t P = oh * ow
    out_arr = np.empty((C * kh * kw, B * P), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, y, xx, r, iy, base, x0, x1
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    r = (c * kh + i) * kw + j
                    x0 = _lo(j, pad, stride)
                    x1 = _hi(j, pad, stride, W, ow)
                    for b in range(B):
                        for y in range(oh):
                            base = b * P + y * ow
                            iy = y * stride + i - pad
                            if iy < 0 or iy >= H or x1 <= x0:
                                for xx in range(ow):
                                    out[r, base + xx] = 0.0
                                continue
                            for xx in range(x0):
                                out[r, base + xx] = 0.0
                            for xx in range(x0, x1):
                                out[r, base + xx] = x[b, c, iy, xx * stride + j - pad]
                            for xx in range(x1, ow):
                                out[r, base + xx] = 0.0
    return out_arr


def col2im(const double[:, ::1] cols, Py_ssize_t B, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t oh = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t P = oh * ow
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, y, xx, r, iy, base, x0, x1
    with nogil:
        for i in range(kh):
            for j in range(kw):
                x0 = _lo(j, pad, stride)
                x1 = _hi(j, pad, stride, W, ow)
                for b in range(B):
                    for c in range(C):
                        r = (c * kh + i) * kw + j
                        for y in range(oh):
                            iy = y * stride + i - pad
                            if iy < 0 or iy >= H:
                                continue
                            base = b * P + y * ow
                            for xx in range(x0, x1):
                                out[b, c, iy, xx * stride + j - pad] += cols[r, base + xx]
    return out_arr
