"""Best-split search for regression trees (numba and numpy paths).

Both paths scan candidate features in ascending index order and thresholds in
ascending order, and only replace the incumbent on a strictly larger gain, so
ties go to the lowest feature and then the lowest threshold.  Thresholds are
midpoints ``0.5 * (a + b)`` of consecutive distinct sorted values.
"""
import numpy as np

from .. import _accel
from .._accel import njit


@njit
def _best_split_nb(X, y, rows, feats, min_leaf):
    m = rows.shape[0]
    best_f = -1
    best_t = 0.0
    best_gain = 0.0
    tot = 0.0
    for i in range(m):
        tot += y[rows[i]]
    parent = tot * tot / m
    xs = np.empty(m)
    ys = np.empty(m)
    for f in feats:
        for i in range(m):
            xs[i] = X[rows[i], f]
        order = np.argsort(xs, kind="mergesort")
        for i in range(m):
            ys[i] = y[rows[order[i]]]
        left = 0.0
        for i in range(1, m):
            left += ys[i - 1]
            if i < min_leaf or m - i < min_leaf:
                continue
            a = xs[order[i - 1]]
            b = xs[order[i]]
            if not a < b:
                continue
            right = tot - left
            gain = left * left / i + right * right / (m - i) - parent
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_t = 0.5 * (a + b)
    return best_f, best_t, best_gain


def _best_split_np(X, y, rows, feats, min_leaf):
    m = len(rows)
    yr = y[rows]
    tot = 0.0
    for v in yr:
        tot += v
    parent = tot * tot / m
    best_f, best_t, best_gain = -1, 0.0, 0.0
    if m < 2:
        return best_f, best_t, best_gain
    i = np.arange(1, m)
    size_ok = (i >= min_leaf) & (m - i >= min_leaf)
    for f in feats:
        xs = X[rows, f]
        order = np.argsort(xs, kind="stable")
        xo = xs[order]
        left = np.cumsum(yr[order])[:-1]
        right = tot - left
        gain = left * left / i + right * right / (m - i) - parent
        ok = size_ok & (xo[:-1] < xo[1:])
        if not ok.any():
            continue
        g = np.where(ok, gain, -np.inf)
        j = int(np.argmax(g))
        if g[j] > best_gain:
            best_gain = float(g[j])
            best_f = int(f)
            best_t = 0.5 * (xo[j] + xo[j + 1])
    return best_f, best_t, best_gain


def best_split(X, y, rows, feats, min_leaf):
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    feats = np.ascontiguousarray(feats, dtype=np.int64)
    if _accel.USE_NUMBA:
        f, t, g = _best_split_nb(X, y, rows, feats, np.int64(min_leaf))
        return int(f), float(t), float(g)
    return _best_split_np(X, y, rows, feats, min_leaf)
