"""Pure-numpy versions of the convolution kernels.

Same signatures and semantics as the compiled module. Used when the extension
is not built, or when ``VLT_KERNELS=python`` forces it.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, k, stride, oh, ow):
    # (N, C, oh, ow, k, k) strided view, no copy
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def im2col(xp, k, stride, oh, ow):
    n, c = xp.shape[:2]
    v = _windows(xp, k, stride, oh, ow)
    # -> (N, C, k, k, oh, ow)
    return np.ascontiguousarray(v.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, oh * ow)


def col2im(cols, c, hp, wp, k, stride, oh, ow):
    n = cols.shape[0]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, oh, ow)
    hs, ws = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + hs : stride, kj : kj + ws : stride] += cols[:, :, ki, kj]
    return out


def depthwise_forward(xp, w, stride, oh, ow):
    n, c = xp.shape[:2]
    k = w.shape[1]
    out = np.zeros((n, c, oh, ow), dtype=xp.dtype)
    hs, ws = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    for ki in range(k):
        for kj in range(k):
            out += xp[:, :, ki : ki + hs : stride, kj : kj + ws : stride] * w[None, :, ki, kj, None, None]
    return out


def depthwise_grad_input(g, w, stride, hp, wp):
    n, c, oh, ow = g.shape
    k = w.shape[1]
    out = np.zeros((n, c, hp, wp), dtype=g.dtype)
    hs, ws = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + hs : stride, kj : kj + ws : stride] += g * w[None, :, ki, kj, None, None]
    return out


def depthwise_grad_weight(g, xp, k, stride):
    oh, ow = g.shape[2:]
    v = _windows(xp, k, stride, oh, ow)
    return np.einsum("ncij,ncijab->cab", g, v, optimize=True)
