"""Differentiable primitives used by the models.

Segment ops take ``indptr`` (length ``B+1``) describing contiguous row blocks,
one per batch element; rows of one cloud or one sparse-tensor batch index are
always stored contiguously.
"""
import numpy as np

from .. import _accel
from .autograd import Tensor, as_tensor, make, matmul, add, mul
from . import _kernels

ELU_ALPHA = 1.0


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def elu(x, alpha=ELU_ALPHA):
    x = as_tensor(x)
    d = x.data
    if _accel.USE_NUMBA:
        out, dydx = _kernels.elu_nb(np.ascontiguousarray(d), float(alpha))
    else:
        neg = d <= 0
        em1 = np.expm1(np.minimum(d, 0.0))
        out = np.where(neg, alpha * em1, d)
        dydx = np.where(neg, alpha * (em1 + 1.0), 1.0)
    return make(out, (x,), lambda g: (g * dydx,))


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make(s, (x,), lambda g: (g * s * (1.0 - s),))


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel normalisation over all rows of ``x`` (N, C).

    ``running_mean``/``running_var`` are plain arrays updated in place during
    training (unbiased variance, like the usual deep-learning convention).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data
    if d.ndim != 2 or d.shape[1] != gamma.shape[-1]:
        raise ValueError(f"batch_norm shape mismatch: {d.shape} vs {gamma.shape}")
    gd = gamma.data
    if training and _accel.USE_NUMBA:
        n = d.shape[0]
        out, xhat, mu, var, inv = _kernels.bn_train_nb(np.ascontiguousarray(d), gd, beta.data, eps)
        _update_running(running_mean, running_var, mu, var, n, momentum)

        def backward(g):
            return _kernels.bn_train_backward_nb(np.ascontiguousarray(g), xhat, gd, inv)

        return make(out, (x, gamma, beta), backward)
    if training:
        n = d.shape[0]
        mu = d.mean(axis=0)
        xc = d - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        _update_running(running_mean, running_var, mu, var, n, momentum)

        def backward(g):
            dxhat = g * gd
            dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (d - running_mean) * inv

        def backward(g):
            return g * gd * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make(xhat * gd + beta.data, (x, gamma, beta), backward)


def _update_running(running_mean, running_var, mu, var, n, momentum):
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    unbiased = var * n / (n - 1) if n > 1 else var
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased


def _check_indptr(indptr, n):
    indptr = np.asarray(indptr, dtype=np.int64)
    if indptr[0] != 0 or indptr[-1] != n:
        raise ValueError("indptr does not cover the rows")
    if np.any(np.diff(indptr) <= 0):
        raise ValueError("empty segment")
    return indptr


def segment_mean(x, indptr):
    """Mean of each contiguous row block -> (B, C)."""
    x = as_tensor(x)
    indptr = _check_indptr(indptr, x.shape[0])
    counts = np.diff(indptr).astype(np.float64)
    sums = np.add.reduceat(x.data, indptr[:-1], axis=0)
    out = sums / counts[:, None]

    def backward(g):
        return (np.repeat(g / counts[:, None], np.diff(indptr), axis=0),)

    return make(out, (x,), backward)


def segment_max(x, indptr):
    """Channelwise max of each contiguous row block -> (B, C).

    The gradient goes to the first row attaining the max.
    """
    x = as_tensor(x)
    d = x.data
    indptr = _check_indptr(indptr, d.shape[0])
    starts = indptr[:-1]
    out = np.maximum.reduceat(d, starts, axis=0)
    counts = np.diff(indptr)
    hit = d == np.repeat(out, counts, axis=0)
    rows = np.arange(d.shape[0])[:, None]
    arg = np.minimum.reduceat(np.where(hit, rows, d.shape[0]), starts, axis=0)

    def backward(g):
        dx = np.zeros_like(d)
        cols = np.broadcast_to(np.arange(d.shape[1]), arg.shape)
        dx[arg, cols] = g
        return (dx,)

    return make(out, (x,), backward)


def segment_broadcast(v, indptr):
    """Repeat row ``b`` of ``v`` (B, C) over segment ``b`` -> (N, C)."""
    v = as_tensor(v)
    indptr = np.asarray(indptr, dtype=np.int64)
    counts = np.diff(indptr)
    out = np.repeat(v.data, counts, axis=0)
    return make(out, (v,), lambda g: (np.add.reduceat(g, indptr[:-1], axis=0),))


def gather_rows(x, idx):
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return make(x.data[idx], (x,), backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def segment_transform(x, mats, indptr):
    """Row ``i`` of segment ``b`` maps to ``x[i] @ mats[b]``; mats is (B, d, e)."""
    x, mats = as_tensor(x), as_tensor(mats)
    xd, md = x.data, mats.data
    indptr = np.asarray(indptr, dtype=np.int64)
    out = np.empty((xd.shape[0], md.shape[2]))
    for b in range(md.shape[0]):
        s, e = indptr[b], indptr[b + 1]
        out[s:e] = xd[s:e] @ md[b]

    def backward(g):
        dx = np.empty_like(xd)
        dm = np.empty_like(md)
        for b in range(md.shape[0]):
            s, e = indptr[b], indptr[b + 1]
            dx[s:e] = g[s:e] @ md[b].T
            dm[b] = xd[s:e].T @ g[s:e]
        return dx, dm

    return make(out, (x, mats), backward)


def smooth_l1(pred, target, beta=1.0):
    """Mean Huber-style loss: 0.5 d^2/beta inside |d| < beta, |d| - beta/2 outside."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {pred.shape} vs {t.shape}")
    d = pred.data - t
    ad = np.abs(d)
    inside = ad < beta
    loss = np.where(inside, 0.5 * d * d / beta, ad - 0.5 * beta).mean()
    n = d.size
    dldp = np.where(inside, d / beta, np.sign(d)) / n
    return make(np.asarray(loss), (pred,), lambda g: (g * dldp,))


def max_reduce(x, indptr=None):
    x = as_tensor(x)
    return segment_max(x, [0, x.shape[0]] if indptr is None else indptr)


def mean_reduce(x, indptr=None):
    x = as_tensor(x)
    return segment_mean(x, [0, x.shape[0]] if indptr is None else indptr)


def scale(x, s):
    return mul(x, s)
