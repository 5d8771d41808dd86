"""Differentiable operators on :class:`~vltrack.tensor.Tensor`.

Layout is NCHW throughout. Broadcasting is deliberately limited to the
patterns the network needs: scalars, a channel vector over NCHW
(:func:`channel_scale`, biases) and per-sample masks.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DimensionError, EncodingError, GroupError, RankError
from .tensor import Tensor, as_tensor


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        a = _t(a)
        return Tensor._from_op(a.data + np.asarray(b, a.dtype), (a,), lambda g: (g,))
    a = _t(a, b)
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b))
    a = _t(a, b)
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor):
        a = _t(a)
        s = np.asarray(b, a.dtype)
        return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,))
    a = _t(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x):
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    y = _sigmoid(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1 - y),))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def clip(x, lo, hi):
    mask = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def exp(x):
    y = np.exp(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y,))


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum(x):  # noqa: A001 - mirrors numpy naming
    shape, dtype = x.shape, x.dtype
    return Tensor._from_op(np.asarray(x.data.sum(), dtype), (x,), lambda g: (np.full(shape, g, dtype),))


def mean(x):
    n = x.data.size
    shape, dtype = x.shape, x.dtype
    return Tensor._from_op(np.asarray(x.data.mean(), dtype), (x,), lambda g: (np.full(shape, g / n, dtype),))


def reshape(x, shape):
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs, axis=1):
    xs = list(xs)
    if not xs:
        raise DimensionError("concat of nothing")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return out

    return Tensor._from_op(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def channel_slice(x, start, stop):
    """``x[:, start:stop]`` for an NCHW (or NC) tensor."""
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for C={c}")
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), bw)


def split(x, sizes):
    """Split along channels into consecutive chunks of the given sizes."""
    if np.sum(sizes) != x.shape[1]:
        raise DimensionError(f"split sizes {sizes} do not add up to C={x.shape[1]}")
    out, lo = [], 0
    for s in sizes:
        out.append(channel_slice(x, lo, lo + s))
        lo += s
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``x`` of shape (B, in) and ``weight`` (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(y, parents, bw)


def embedding_mean(table, sequences):
    """Mean of embedding rows per sequence of ids -> (B, d)."""
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    rows = []
    for seq in sequences:
        ids = np.asarray(seq, dtype=np.int64)
        if ids.size == 0:
            raise EncodingError("cannot encode an empty token sequence")
        if ids.min() < 0 or ids.max() >= table.shape[0]:
            raise DimensionError("token id outside the embedding table")
        rows.append(ids)
    td = table.data
    y = np.stack([td[ids].mean(axis=0) for ids in rows])

    def bw(g):
        gt = np.zeros_like(td)
        for b, ids in enumerate(rows):
            np.add.at(gt, ids, np.broadcast_to(g[b] / ids.size, (ids.size, td.shape[1])))
        return (gt,)

    return Tensor._from_op(y, (table,), bw)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def _pad(a, p):
    if p == 0:
        return np.ascontiguousarray(a)
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(a, p):
    if p == 0:
        return a
    return np.ascontiguousarray(a[:, :, p:-p, p:-p])


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation, NCHW input and OIKK weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    if padding < 0 or stride < 1 or groups < 1:
        raise DimensionError("conv2d: padding must be >= 0, stride and groups >= 1")
    n, c, h, w = x.shape
    o, cg, k, k2 = weight.shape
    if c % groups:
        raise GroupError(f"input channels {c} not divisible by groups={groups}")
    if o % groups:
        raise GroupError(f"output channels {o} not divisible by groups={groups}")
    if cg != c // groups or k != k2:
        raise DimensionError(f"conv2d: weight {weight.shape} does not fit input {x.shape} with groups={groups}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias {bias.shape}, expected ({o},)")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{w}")

    if groups == c and o == c:
        y, bw_core = _conv_depthwise(x.data, weight.data, stride, padding, oh, ow)
    elif k == 1 and padding == 0 and groups == 1:
        y, bw_core = _conv_pointwise(x.data, weight.data, stride, oh, ow)
    else:
        y, bw_core = _conv_general(x.data, weight.data, stride, padding, groups, oh, ow)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def bw(g):
        gx, gw = bw_core(g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(y, parents, bw)


def _conv_depthwise(xd, wd, stride, padding, oh, ow):
    xp = _pad(xd, padding)
    w3 = np.ascontiguousarray(wd[:, 0])
    k = w3.shape[1]
    y = kernels.depthwise_forward(xp, w3, stride, oh, ow)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = _unpad(kernels.depthwise_grad_input(g, w3, stride, xp.shape[2], xp.shape[3]), padding)
        gw = kernels.depthwise_grad_weight(g, xp, k, stride)[:, None]
        return gx, gw

    return y, bw


def _conv_pointwise(xd, wd, stride, oh, ow):
    n, c = xd.shape[:2]
    xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
    xs = np.ascontiguousarray(xs).reshape(n, c, oh * ow)
    w2 = wd[:, :, 0, 0]
    y = np.matmul(w2, xs).reshape(n, -1, oh, ow)

    def bw(g):
        g3 = g.reshape(n, -1, oh * ow)
        gw = np.einsum("nol,ncl->oc", g3, xs, optimize=True)[:, :, None, None]
        gxs = np.matmul(w2.T, g3).reshape(n, c, oh, ow)
        if stride > 1:
            gx = np.zeros(xd.shape, xd.dtype)
            gx[:, :, ::stride, ::stride] = gxs
        else:
            gx = gxs
        return gx, gw

    return y, bw


def _conv_general(xd, wd, stride, padding, groups, oh, ow):
    n, c = xd.shape[:2]
    o, cg, k, _ = wd.shape
    xp = _pad(xd, padding)
    cols = kernels.im2col(xp, k, stride, oh, ow)  # (N, C*k*k, L)
    og = o // groups
    colsg = cols.reshape(n, groups, cg * k * k, oh * ow)
    wg = wd.reshape(groups, og, cg * k * k)
    y = np.matmul(wg[None], colsg).reshape(n, o, oh, ow)

    def bw(g):
        g4 = g.reshape(n, groups, og, oh * ow)
        gw = np.einsum("ngol,ngkl->gok", g4, colsg, optimize=True).reshape(wd.shape)
        gcols = np.matmul(wg.transpose(0, 2, 1)[None], g4).reshape(n, c * k * k, oh * ow)
        gxp = kernels.col2im(np.ascontiguousarray(gcols), c, xp.shape[2], xp.shape[3], k, stride, oh, ow)
        return _unpad(gxp, padding), gw

    return y, bw


def dw_xcorr(search, kernel):
    """Per-sample, per-channel valid cross-correlation of ``search`` with ``kernel``.

    ``search`` is (N, C, Hs, Ws) and ``kernel`` (N, C, Hk, Wk); output is
    (N, C, Hs-Hk+1, Ws-Wk+1).
    """
    if search.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("dw_xcorr expects 4-D operands")
    n, c, hs, ws = search.shape
    if kernel.shape[:2] != (n, c):
        raise DimensionError(f"dw_xcorr: batch/channel mismatch {search.shape} vs {kernel.shape}")
    hk, wk = kernel.shape[2:]
    if hk > hs or wk > ws:
        raise DimensionError(f"dw_xcorr: template {hk}x{wk} larger than search {hs}x{ws}")
    if hk != wk:
        raise DimensionError("dw_xcorr: square templates only")
    oh, ow = hs - hk + 1, ws - wk + 1
    xs = np.ascontiguousarray(search.data).reshape(1, n * c, hs, ws)
    kk = np.ascontiguousarray(kernel.data).reshape(n * c, hk, wk)
    y = kernels.depthwise_forward(xs, kk, 1, oh, ow).reshape(n, c, oh, ow)

    def bw(g):
        g1 = np.ascontiguousarray(g).reshape(1, n * c, oh, ow)
        gs = kernels.depthwise_grad_input(g1, kk, 1, hs, ws).reshape(n, c, hs, ws)
        gk = kernels.depthwise_grad_weight(g1, xs, hk, 1).reshape(n, c, hk, wk)
        return gs, gk

    return Tensor._from_op(y, (search, kernel), bw)


def channel_shuffle(x, groups):
    """View channels as (groups, C/groups), transpose, flatten."""
    n, c = x.shape[:2]
    if c % groups:
        raise GroupError(f"channel_shuffle: C={c} not divisible by groups={groups}")
    perm = np.arange(c).reshape(groups, c // groups).T.reshape(-1)
    inv = np.argsort(perm)
    return Tensor._from_op(np.ascontiguousarray(x.data[:, perm]), (x,), lambda g: (np.ascontiguousarray(g[:, inv]),))


def channel_scale(x, s):
    """Multiply every spatial position of ``x`` (N, C, H, W) by ``s`` (N, C)."""
    if x.ndim != 4 or s.ndim != 2 or s.shape != x.shape[:2]:
        raise DimensionError(f"channel_scale: feature {x.shape} vs selector {s.shape}")
    xd, sd = x.data, s.data
    y = xd * sd[:, :, None, None]

    def bw(g):
        return g * sd[:, :, None, None], np.einsum("nchw,nchw->nc", g, xd)

    return Tensor._from_op(y, (x, s), bw)


def spatial_pool(x, weights):
    """``sum_hw x[n, c, h, w] * weights[n, h, w]`` -> (N, C); ``weights`` is constant."""
    wts = np.asarray(weights, dtype=x.dtype)
    if wts.shape != (x.shape[0],) + x.shape[2:]:
        raise DimensionError(f"spatial_pool: weights {wts.shape} vs feature {x.shape}")
    y = np.einsum("nchw,nhw->nc", x.data, wts)
    return Tensor._from_op(y, (x,), lambda g: (g[:, :, None, None] * wts[:, None],))


def global_avg_pool(x):
    n, c, h, w = x.shape
    return spatial_pool(x, np.full((n, h, w), 1.0 / (h * w), dtype=x.dtype))


def batch_norm(x, gamma, beta, state, training, eps=1e-5):
    """Batch normalization over (N, H, W) per channel.

    ``state`` carries ``running_mean``, ``running_var`` (numpy arrays),
    ``momentum`` (``None`` means cumulative average) and
    ``num_batches_tracked``; it is updated in place in training mode.
    """
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels but parameters of shape {gamma.shape}")
    xd = x.data
    gd, bd = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    if training:
        m = xd.size // c
        mu = np.einsum("nchw->c", xd) / m
        xc = xd - mu[None, :, None, None]
        var = np.einsum("nchw,nchw->c", xc, xc) / m
        _update_running(state, mu, var * (m / max(m - 1, 1)))
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * invstd[None, :, None, None]
        y = xhat * gd + bd

        def bw(g):
            gb = np.einsum("nchw->c", g)
            gg = np.einsum("nchw,nchw->c", g, xhat)
            gx = (gd * invstd[None, :, None, None] / m) * (
                m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None]
            )
            return gx, gg, gb

    else:
        invstd = (1.0 / np.sqrt(state.running_var + eps)).astype(xd.dtype)
        xhat = (xd - state.running_mean.astype(xd.dtype)[None, :, None, None]) * invstd[None, :, None, None]
        y = xhat * gd + bd

        def bw(g):
            return g * gd * invstd[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._from_op(y.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def _update_running(state, mu, var):
    state.num_batches_tracked += 1
    if state.momentum is None:
        f = 1.0 / state.num_batches_tracked
    else:
        f = state.momentum
    state.running_mean += f * (mu - state.running_mean)
    state.running_var += f * (var - state.running_var)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits, targets, weights):
    """``sum(weights * BCE(sigmoid(logits), targets))``; targets/weights constant."""
    t = np.asarray(targets, dtype=logits.dtype)
    w = np.asarray(weights, dtype=logits.dtype)
    if t.shape != logits.shape or w.shape != logits.shape:
        raise DimensionError("bce_with_logits: targets/weights must match logits")
    x = logits.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    val = np.asarray((w * per).sum(), dtype=x.dtype)
    return Tensor._from_op(val, (logits,), lambda g: (g * w * (_sigmoid(x) - t),))


def iou_loss(pred, target, weights):
    """``sum(weights * (1 - IoU))`` between (l, t, r, b) distance maps.

    ``pred`` and ``target`` are (N, 4, H, W) with non-negative distances from
    each cell to the box sides; ``weights`` is (N, H, W) and constant.
    """
    tg = np.asarray(target, dtype=pred.dtype)
    w = np.asarray(weights, dtype=pred.dtype)
    if pred.ndim != 4 or pred.shape[1] != 4 or tg.shape != pred.shape or w.shape != (pred.shape[0],) + pred.shape[2:]:
        raise DimensionError("iou_loss: expected (N,4,H,W) maps and (N,H,W) weights")
    p = pred.data
    pl, pt, pr, pb = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    tl, tt, tr, tb = tg[:, 0], tg[:, 1], tg[:, 2], tg[:, 3]
    pa = (pl + pr) * (pt + pb)
    ta = (tl + tr) * (tt + tb)
    wi = np.minimum(pl, tl) + np.minimum(pr, tr)
    hi = np.minimum(pt, tt) + np.minimum(pb, tb)
    inter = wi * hi
    union = pa + ta - inter
    union_safe = np.where(w > 0, union, 1.0)
    iou = inter / union_safe
    val = np.asarray((w * (1.0 - iou)).sum(), dtype=p.dtype)

    def bw(g):
        # d(1 - I/U) = -(dI * U - I * dU) / U^2,  dU = dA_pred - dI
        coef = -g * w / union_safe**2
        di_coef = union_safe + inter  # multiplies dI
        da_coef = -inter  # multiplies dA_pred
        dwi = [(pl < tl), (pr < tr)]
        dhi = [(pt < tt), (pb < tb)]
        grad = np.empty_like(p)
        # l, r affect width; t, b affect height
        grad[:, 0] = coef * (di_coef * dwi[0] * hi + da_coef * (pt + pb))
        grad[:, 2] = coef * (di_coef * dwi[1] * hi + da_coef * (pt + pb))
        grad[:, 1] = coef * (di_coef * dhi[0] * wi + da_coef * (pl + pr))
        grad[:, 3] = coef * (di_coef * dhi[1] * wi + da_coef * (pl + pr))
        return (grad,)

    return Tensor._from_op(val, (pred,), bw)


def scalar(x):
    """Guard that ``x`` is a scalar tensor."""
    x = as_tensor(x)
    if x.data.size != 1:
        raise RankError(f"expected a scalar, got shape {x.shape}")
    return x
