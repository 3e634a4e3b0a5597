# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution, pooling and involution.

Every function mirrors one in ``_pykernels`` and must return identical
results; inputs are C-contiguous float64 arrays.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ni, ci, a, b, i, j, row, col, r0
    out = np.empty((n, c * k * k, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for a in range(k):
                    for b in range(k):
                        row = (ci * k + a) * k + b
                        for i in range(ho):
                            r0 = i * stride + a
                            col = i * wo
                            for j in range(wo):
                                cols[ni, row, col + j] = xp[ni, ci, r0, j * stride + b]
    return out


def col2im(const double[:, :, ::1] cols, int c, int hp, int wp, int k, int stride, int ho, int wo):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t ni, ci, a, b, i, j, row, col, r0
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = out
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for a in range(k):
                    for b in range(k):
                        row = (ci * k + a) * k + b
                        for i in range(ho):
                            r0 = i * stride + a
                            col = i * wo
                            for j in range(wo):
                                xp[ni, ci, r0, j * stride + b] += cols[ni, row, col + j]
    return out


def maxpool_forward(const double[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    """Returns (out, idx); idx is the flat offset of the winner inside its padded plane."""
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], wp = xp.shape[3]
    cdef Py_ssize_t ni, ci, a, b, i, j, best_idx, r, q
    cdef double best, v
    out = np.empty((n, c, ho, wo), dtype=np.float64)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] ix = idx
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        r = i * stride
                        q = j * stride
                        best = xp[ni, ci, r, q]
                        best_idx = r * wp + q
                        for a in range(k):
                            for b in range(k):
                                v = xp[ni, ci, r + a, q + b]
                                # strict '>' keeps the lowest linear index on ties
                                if v > best:
                                    best = v
                                    best_idx = (r + a) * wp + q + b
                        o[ni, ci, i, j] = best
                        ix[ni, ci, i, j] = best_idx
    return out, idx


def maxpool_backward(const double[:, :, :, ::1] g, const cnp.int64_t[:, :, :, ::1] idx, int hp, int wp):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t ni, ci, i, j, t
    out = np.zeros((n, c, hp * wp), dtype=np.float64)
    cdef double[:, :, ::1] gx = out
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        t = idx[ni, ci, i, j]
                        gx[ni, ci, t] += g[ni, ci, i, j]
    return out.reshape(n, c, hp, wp)


def involution_forward(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] ker, int k, int groups):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t h = ker.shape[2], w = ker.shape[3]
    cdef Py_ssize_t cg = c // groups, kk = k * k
    cdef Py_ssize_t ni, ci, g, a, b, i, j, kc
    cdef double acc
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    with nogil:
        for ni in range(n):
            for ci in range(c):
                g = ci // cg
                for a in range(k):
                    for b in range(k):
                        kc = g * kk + a * k + b
                        for i in range(h):
                            for j in range(w):
                                y[ni, ci, i, j] += ker[ni, kc, i, j] * xp[ni, ci, i + a, j + b]
    return out


def involution_backward(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] xp,
                        const double[:, :, :, ::1] ker, int k, int groups):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t h = ker.shape[2], w = ker.shape[3]
    cdef Py_ssize_t cg = c // groups, kk = k * k
    cdef Py_ssize_t ni, ci, g, a, b, i, j, kc
    cdef double gv
    gxp_arr = np.zeros((n, c, hp, wp), dtype=np.float64)
    gker_arr = np.zeros((n, groups * kk, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] gxp = gxp_arr
    cdef double[:, :, :, ::1] gker = gker_arr
    with nogil:
        for ni in range(n):
            for ci in range(c):
                g = ci // cg
                for a in range(k):
                    for b in range(k):
                        kc = g * kk + a * k + b
                        for i in range(h):
                            for j in range(w):
                                gv = gy[ni, ci, i, j]
                                gker[ni, kc, i, j] += gv * xp[ni, ci, i + a, j + b]
                                gxp[ni, ci, i + a, j + b] += gv * ker[ni, kc, i, j]
    return gxp_arr, gker_arr
