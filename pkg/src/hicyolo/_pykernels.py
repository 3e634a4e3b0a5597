"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``.

Signatures and return layouts match the compiled module exactly so the two
can be swapped at import time.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, k, stride, ho, wo):
    # (N, C, Ho, Wo, k, k) strided view, no copy
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : ho * stride : stride, : wo * stride : stride]


def im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = _windows(xp, k, stride, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def col2im(cols, c, hp, wp, k, stride, ho, wo):
    n = cols.shape[0]
    out = np.zeros((n, c, hp, wp))
    g6 = cols.reshape(n, c, k, k, ho, wo)
    for a in range(k):
        for b in range(k):
            out[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += g6[:, :, a, b]
    return out


def maxpool_forward(xp, k, stride, ho, wo):
    n, c, _, wp = xp.shape
    win = _windows(xp, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    am = win.argmax(axis=-1)  # first occurrence -> lowest linear index
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + am // k
    cols = np.arange(wo)[None, :] * stride + am % k
    return np.ascontiguousarray(out), (rows * wp + cols).astype(np.int64)


def maxpool_backward(g, idx, hp, wp):
    n, c = g.shape[:2]
    plane = hp * wp
    flat = idx.reshape(n * c, -1) + (np.arange(n * c) * plane)[:, None]
    out = np.bincount(flat.ravel(), weights=g.ravel(), minlength=n * c * plane)
    return out.reshape(n, c, hp, wp)


def _unfold(xp, k, h, w):
    # (N, C, H, W, k*k)
    n, c = xp.shape[:2]
    return sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(n, c, h, w, k * k)


def involution_forward(xp, ker, k, groups):
    n, c = xp.shape[:2]
    h, w = ker.shape[2:]
    unf = _unfold(xp, k, h, w).reshape(n, groups, c // groups, h, w, k * k)
    kg = ker.reshape(n, groups, k * k, h, w)
    y = np.einsum("ngchwt,ngthw->ngchw", unf, kg, optimize=True)
    return y.reshape(n, c, h, w)


def involution_backward(gy, xp, ker, k, groups):
    n, c, hp, wp = xp.shape
    h, w = ker.shape[2:]
    cg = c // groups
    unf = _unfold(xp, k, h, w).reshape(n, groups, cg, h, w, k * k)
    kg = ker.reshape(n, groups, k * k, h, w)
    g5 = gy.reshape(n, groups, cg, h, w)
    gker = np.einsum("ngchw,ngchwt->ngthw", g5, unf, optimize=True).reshape(n, groups * k * k, h, w)
    gxp = np.zeros((n, c, hp, wp))
    for a in range(k):
        for b in range(k):
            tap = (g5 * kg[:, :, None, a * k + b]).reshape(n, c, h, w)
            gxp[:, :, a : a + h, b : b + w] += tap
    return gxp, gker
