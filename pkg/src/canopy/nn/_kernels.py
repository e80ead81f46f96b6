"""Fused elementwise kernels for the numba backend.

Each function has a numpy twin in :mod:`canopy.nn.functional`; the dispatcher
there picks one according to :mod:`canopy._accel`.
"""
import math

import numpy as np

from .._accel import njit


@njit
def elu_nb(d, alpha):
    out = np.empty_like(d)
    dydx = np.empty_like(d)
    flat, fo, fg = d.ravel(), out.ravel(), dydx.ravel()
    for i in range(flat.shape[0]):
        v = flat[i]
        if v <= 0.0:
            e = math.expm1(v)
            fo[i] = alpha * e
            fg[i] = alpha * (e + 1.0)
        else:
            fo[i] = v
            fg[i] = 1.0
    return out, dydx


@njit
def bn_train_nb(d, gamma, beta, eps):
    n, c = d.shape
    mu = np.zeros(c)
    for r in range(n):
        for j in range(c):
            mu[j] += d[r, j]
    mu /= n
    var = np.zeros(c)
    for r in range(n):
        for j in range(c):
            t = d[r, j] - mu[j]
            var[j] += t * t
    var /= n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(d)
    out = np.empty_like(d)
    for r in range(n):
        for j in range(c):
            h = (d[r, j] - mu[j]) * inv[j]
            xhat[r, j] = h
            out[r, j] = h * gamma[j] + beta[j]
    return out, xhat, mu, var, inv


@njit
def bn_train_backward_nb(g, xhat, gamma, inv):
    n, c = g.shape
    sg = np.zeros(c)
    sgx = np.zeros(c)
    for r in range(n):
        for j in range(c):
            sg[j] += g[r, j]
            sgx[j] += g[r, j] * xhat[r, j]
    a = gamma * inv
    m1 = sg / n
    m2 = sgx / n
    dx = np.empty_like(g)
    for r in range(n):
        for j in range(c):
            dx[r, j] = a[j] * (g[r, j] - m1[j] - xhat[r, j] * m2[j])
    return dx, sgx, sg
