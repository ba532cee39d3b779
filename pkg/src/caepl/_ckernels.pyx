# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im and 2x2 max-pool kernels.

Loop order matches the accumulation order of the numpy fallback in
``_kernels_py`` so both backends agree to rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

ctypedef fused real:
    float
    double


cdef inline void _valid_range(Py_ssize_t j, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t W,
                              Py_ssize_t wo, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns ox with 0 <= ox*stride + j - pad < W
    cdef Py_ssize_t a = pad - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    a = W - 1 + pad - j
    hi[0] = -1 if a < 0 else a // stride + 1
    if hi[0] > wo:
        hi[0] = wo
    if lo[0] > hi[0]:
        lo[0] = hi[0] if hi[0] > 0 else 0


def _im2col(real[:, :, :, ::1] x, real[:, ::1] cols,
            int kh, int kw, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n, c, i, j, oy, ox, row, lo, hi, iy
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef real* dst
    cdef real* src
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        _valid_range(j, stride, pad, W, wo, &lo, &hi)
                        for oy in range(ho):
                            dst = &cols[row, (n * ho + oy) * wo]
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H or hi <= lo:
                                memset(dst, 0, wo * sizeof(real))
                                continue
                            if lo > 0:
                                memset(dst, 0, lo * sizeof(real))
                            if hi < wo:
                                memset(dst + hi, 0, (wo - hi) * sizeof(real))
                            src = &x[n, c, iy, 0] + (lo * stride + j - pad)
                            if stride == 1:
                                memcpy(dst + lo, src, (hi - lo) * sizeof(real))
                            else:
                                for ox in range(hi - lo):
                                    dst[lo + ox] = src[ox * stride]


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] out,
            int kh, int kw, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n, c, i, j, oy, ox, row, base, lo, hi, iy
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        _valid_range(j, stride, pad, W, wo, &lo, &hi)
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                continue
                            base = (n * ho + oy) * wo
                            for ox in range(lo, hi):
                                out[n, c, iy, ox * stride + j - pad] += cols[row, base + ox]


def _maxpool_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] out, cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n, c, oy, ox
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], HO = out.shape[2], WO = out.shape[3]
    cdef real best, v
    cdef cnp.int8_t k
    with nogil:
        for n in range(N):
            for c in range(C):
                for oy in range(HO):
                    for ox in range(WO):
                        best = x[n, c, 2 * oy, 2 * ox]
                        k = 0
                        v = x[n, c, 2 * oy, 2 * ox + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[n, c, 2 * oy + 1, 2 * ox]
                        if v > best:
                            best = v
                            k = 2
                        v = x[n, c, 2 * oy + 1, 2 * ox + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[n, c, oy, ox] = best
                        idx[n, c, oy, ox] = k


def _maxpool_bwd(real[:, :, :, ::1] g, cnp.int8_t[:, :, :, ::1] idx, real[:, :, :, ::1] out):
    cdef Py_ssize_t n, c, oy, ox
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], HO = g.shape[2], WO = g.shape[3]
    cdef cnp.int8_t k
    with nogil:
        for n in range(N):
            for c in range(C):
                for oy in range(HO):
                    for ox in range(WO):
                        k = idx[n, c, oy, ox]
                        out[n, c, 2 * oy + (k >> 1), 2 * ox + (k & 1)] = g[n, c, oy, ox]


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad, ho, wo)
    return cols


def col2im(cols, x_shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, pad, ho, wo)
    return out


def maxpool2x2_forward(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    _maxpool_fwd(x, out, idx)
    return out, idx


def maxpool2x2_backward(grad_out, idx, x_shape):
    grad_out = np.ascontiguousarray(grad_out)
    out = np.zeros(x_shape, dtype=grad_out.dtype)
    _maxpool_bwd(grad_out, np.ascontiguousarray(idx), out)
    return out
