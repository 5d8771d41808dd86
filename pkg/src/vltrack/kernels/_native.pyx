# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

All inputs are C-contiguous NCHW arrays that are already zero-padded by the
caller. Every function mirrors one in ``_numpy.py`` and must agree with it to
floating-point rounding.
"""
import numpy as np
cimport cython
from cython cimport floating


def im2col(floating[:, :, :, ::1] xp, int k, int stride, int oh, int ow):
    """Unfold padded ``xp`` into ``(N, C*k*k, oh*ow)`` patch columns."""
    cdef Py_ssize_t n_, c_, n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ki, kj, i, j, row, base
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c * k * k, oh * ow), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    with nogil:
        for n_ in range(n):
            for c_ in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (c_ * k + ki) * k + kj
                        for i in range(oh):
                            base = i * ow
                            for j in range(ow):
                                cols[n_, row, base + j] = xp[n_, c_, i * stride + ki, j * stride + kj]
    return out


def col2im(floating[:, :, ::1] cols, int c, int hp, int wp, int k, int stride, int oh, int ow):
    """Fold patch columns back onto a padded ``(N, c, hp, wp)`` image, summing overlaps."""
    cdef Py_ssize_t n_, c_, n = cols.shape[0]
    cdef Py_ssize_t ki, kj, i, j, row, base
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] xp = out
    with nogil:
        for n_ in range(n):
            for c_ in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (c_ * k + ki) * k + kj
                        for i in range(oh):
                            base = i * ow
                            for j in range(ow):
                                xp[n_, c_, i * stride + ki, j * stride + kj] += cols[n_, row, base + j]
    return out


def depthwise_forward(floating[:, :, :, ::1] xp, floating[:, :, ::1] w, int stride, int oh, int ow):
    """Per-channel correlation of padded ``xp`` with ``w`` of shape ``(C, k, k)``."""
    cdef Py_ssize_t n_, c_, n = xp.shape[0], c = xp.shape[1], k = w.shape[1]
    cdef Py_ssize_t ki, kj, i, j, wp = xp.shape[3]
    cdef floating wv
    cdef floating *yrow
    cdef floating *xrow
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, oh, ow), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    if out.size == 0:
        return out
    with nogil:
        for n_ in range(n):
            for c_ in range(c):
                for ki in range(k):
                    for kj in range(k):
                        wv = w[c_, ki, kj]
                        for i in range(oh):
                            yrow = &y[n_, c_, i, 0]
                            xrow = &xp[n_, c_, i * stride + ki, 0] + kj
                            if stride == 1:
                                for j in range(ow):
                                    yrow[j] += wv * xrow[j]
                            else:
                                for j in range(ow):
                                    yrow[j] += wv * xrow[j * stride]
    return out


def depthwise_grad_input(floating[:, :, :, ::1] g, floating[:, :, ::1] w, int stride, int hp, int wp):
    """Gradient w.r.t. the padded input of :func:`depthwise_forward`."""
    cdef Py_ssize_t n_, c_, n = g.shape[0], c = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    cdef Py_ssize_t k = w.shape[1], ki, kj, i, j
    cdef floating wv
    cdef floating *dxrow
    cdef floating *grow
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    if g.size == 0:
        return out
    with nogil:
        for n_ in range(n):
            for c_ in range(c):
                for ki in range(k):
                    for kj in range(k):
                        wv = w[c_, ki, kj]
                        for i in range(oh):
                            dxrow = &dx[n_, c_, i * stride + ki, 0] + kj
                            grow = &g[n_, c_, i, 0]
                            if stride == 1:
                                for j in range(ow):
                                    dxrow[j] += wv * grow[j]
                            else:
                                for j in range(ow):
                                    dxrow[j * stride] += wv * grow[j]
    return out


def depthwise_grad_weight(floating[:, :, :, ::1] g, floating[:, :, :, ::1] xp, int k, int stride):
    """Gradient w.r.t. the ``(C, k, k)`` kernel of :func:`depthwise_forward`.

    Products are summed into one accumulator per output column first, which
    keeps the inner loop free of a serial dependency.
    """
    cdef Py_ssize_t n_, c_, n = g.shape[0], c = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    cdef Py_ssize_t ki, kj, i, j
    cdef floating acc
    cdef floating *grow
    cdef floating *xrow
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((c, k, k), dtype=dtype)
    lanes_arr = np.zeros(max(ow, 1), dtype=dtype)
    cdef floating[:, :, ::1] dw = out
    cdef floating[::1] lanes = lanes_arr
    if g.size == 0:
        return out
    with nogil:
        for c_ in range(c):
            for ki in range(k):
                for kj in range(k):
                    for j in range(ow):
                        lanes[j] = 0
                    for n_ in range(n):
                        for i in range(oh):
                            grow = &g[n_, c_, i, 0]
                            xrow = &xp[n_, c_, i * stride + ki, 0] + kj
                            if stride == 1:
                                for j in range(ow):
                                    lanes[j] += grow[j] * xrow[j]
                            else:
                                for j in range(ow):
                                    lanes[j] += grow[j] * xrow[j * stride]
                    acc = 0
                    for j in range(ow):
                        acc = acc + lanes[j]
                    dw[c_, ki, kj] = acc
    return out
