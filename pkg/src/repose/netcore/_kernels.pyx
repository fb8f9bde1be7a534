# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for zero same-padded 2D convolution.

Column matrix layout is pixel-major: row ``(b, i, j)``, column ``(c, ki, kj)``,
so ``cols @ W.reshape(F, -1).T`` is the convolution output.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t R = C * k * k
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B * ho * wo, R), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, c, ki, kj, i, j, yy, xx, y0, x0
    cdef real* dst
    cdef const real* src
    with nogil:
        for b in range(B):
            for i in range(ho):
                y0 = i * stride - pad
                for j in range(wo):
                    x0 = j * stride - pad
                    dst = &cols[(b * ho + i) * wo + j, 0]
                    if 0 <= y0 and y0 + k <= H and 0 <= x0 and x0 + k <= W:
                        for c in range(C):
                            src = &x[b, c, y0, x0]
                            for ki in range(k):
                                for kj in range(k):
                                    dst[kj] = src[kj]
                                dst += k
                                src += W
                    else:
                        for c in range(C):
                            for ki in range(k):
                                yy = y0 + ki
                                for kj in range(k):
                                    xx = x0 + kj
                                    if 0 <= yy < H and 0 <= xx < W:
                                        dst[0] = x[b, c, yy, xx]
                                    else:
                                        dst[0] = 0
                                    dst += 1
    return out


def col2im(real[:, ::1] cols, int B, int C, int H, int W, int k, int stride,
           int pad, int ho, int wo):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t b, c, ki, kj, i, j, yy, xx, y0, x0
    cdef const real* src
    cdef real* dst
    with nogil:
        for b in range(B):
            for i in range(ho):
                y0 = i * stride - pad
                for j in range(wo):
                    x0 = j * stride - pad
                    src = &cols[(b * ho + i) * wo + j, 0]
                    if 0 <= y0 and y0 + k <= H and 0 <= x0 and x0 + k <= W:
                        for c in range(C):
                            dst = &x[b, c, y0, x0]
                            for ki in range(k):
                                for kj in range(k):
                                    dst[kj] += src[kj]
                                src += k
                                dst += W
                    else:
                        for c in range(C):
                            for ki in range(k):
                                yy = y0 + ki
                                for kj in range(k):
                                    xx = x0 + kj
                                    if 0 <= yy < H and 0 <= xx < W:
                                        x[b, c, yy, xx] += src[0]
                                    src += 1
    return out
