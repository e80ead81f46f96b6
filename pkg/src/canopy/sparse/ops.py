"""Voxelisation, sparse convolution, pooling and radius search."""
import numpy as np

from ..nn.autograd import Tensor, as_tensor, make
from ..nn import functional as F
from .. import _accel
from . import _kernels
from ._kernels import kernel_map, pack_keys, radius_search
from .tensor import SparseTensor, kernel_offsets, window_offsets

# layers with c_in * c_out up to this use the fused pair loop under numba
FUSED_MAX_WIDTH = 2048


def _bucket(coords, grid_m, batch, extra):
    """Group rows by voxel in a content-determined order.

    Returns (keys, order, starts): rows ``order[starts[v]:starts[v+1]]`` form
    voxel ``v``.  Inside a voxel rows are sorted by their own values so the
    summation order does not depend on the input order.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if grid_m <= 0:
        raise ValueError("grid size must be positive")
    cells = np.floor(coords / grid_m).astype(np.int64)
    keys = np.column_stack([batch, cells])
    packed = pack_keys(keys)
    tie_cols = [extra[:, c] for c in range(extra.shape[1] - 1, -1, -1)]
    tie_cols += [coords[:, c] for c in (2, 1, 0)]
    order = np.lexsort(tuple(tie_cols) + (packed,))
    sp = packed[order]
    first = np.ones(len(sp), dtype=bool)
    first[1:] = sp[1:] != sp[:-1]
    starts = np.nonzero(first)[0]
    return keys[order][starts], order, np.append(starts, len(sp))


def _segment_means(values, order, starts):
    sums = np.add.reduceat(values[order], starts[:-1], axis=0)
    return sums / np.diff(starts)[:, None]


def grid_sample(coords, features, grid_m, batch=None, batch_size=None):
    """Voxelise points: key = floor(coord / grid_m), features averaged per voxel."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64).reshape(len(coords), -1)
    batch = np.zeros(len(coords), np.int64) if batch is None else np.asarray(batch, np.int64)
    if batch_size is None:
        batch_size = int(batch.max()) + 1 if len(batch) else 1
    if len(coords) == 0:
        return SparseTensor(np.empty((0, 4), np.int64), np.empty((0, features.shape[1])),
                            1, grid_m, batch_size)
    keys, order, starts = _bucket(coords, grid_m, batch, features)
    return SparseTensor(keys, _segment_means(features, order, starts), 1, grid_m, batch_size)


def grid_sample_mean_points(coords, features, grid_m, batch=None):
    """Pool points per grid cell keeping real positions.

    Returns ``(positions, features, keys)`` with the mean position and mean
    feature row of every occupied cell, cells in canonical key order.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64).reshape(len(coords), -1)
    batch = np.zeros(len(coords), np.int64) if batch is None else np.asarray(batch, np.int64)
    if len(coords) == 0:
        return np.empty((0, 3)), np.empty((0, features.shape[1])), np.empty((0, 4), np.int64)
    keys, order, starts = _bucket(coords, grid_m, batch, features)
    return (_segment_means(coords, order, starts), _segment_means(features, order, starts), keys)


def _maps(st, offsets_key, offsets, stride, out_keys):
    """Kernel map cached on the input tensor's key array."""
    cache = st.__dict__.setdefault("_map_cache", {})
    key = (offsets_key, stride, id(out_keys))
    hit = cache.get(key)
    if hit is not None and hit[0] is out_keys:
        return hit[1]
    if stride == 1 and len(offsets) == 1 and not np.any(offsets):
        idx = np.arange(len(st.keys))
        kmap = (idx, idx, np.array([0, len(idx)], dtype=np.int64))
    else:
        kmap = kernel_map(st.keys, out_keys, offsets, stride)
    cache[key] = (out_keys, kmap)
    return kmap


def _out_keys(st, stride):
    if stride == 1:
        return st.keys
    cache = st.__dict__.setdefault("_down_cache", {})
    if stride not in cache:
        coarse = st.keys.copy()
        coarse[:, 1:] = np.floor_divide(coarse[:, 1:], stride)
        packed = pack_keys(coarse)
        _, first = np.unique(packed, return_index=True)
        cache[stride] = coarse[first]  # np.unique order is the canonical order
    return cache[stride]


def _conv_forward(x, w, in_idx, out_idx, ptr, n_out):
    out = np.zeros((n_out, w.shape[2]))
    for m in range(w.shape[0]):
        s, e = ptr[m], ptr[m + 1]
        if s == e:
            continue
        out[out_idx[s:e]] += x[in_idx[s:e]] @ w[m]
    return out


def sparse_conv3d(inp, weight, bias=None, stride=1):
    """Generalised sparse convolution over occupied voxels.

    ``weight`` has shape (K, C_in, C_out) with K = k^3 offsets in
    :func:`kernel_offsets` order.  Stride 1 keeps the key set; stride s > 1
    outputs the distinct ``floor(key / s)`` and gathers inputs at
    ``out * s + offset``.
    """
    if stride not in (1, 2, 3):
        raise ValueError("stride must be 1, 2 or 3")
    plain = not any(isinstance(t, Tensor) for t in (inp.features, weight, bias))
    w = as_tensor(weight)
    n_off, c_in, c_out = w.shape
    k = int(round(n_off ** (1.0 / 3.0)))
    if k ** 3 != n_off:
        raise ValueError(f"weight count {n_off} is not a cube")
    if c_in != inp.channels:
        raise ValueError(f"channel mismatch: input {inp.channels}, weight {c_in}")
    x = as_tensor(inp.features)
    out_keys = _out_keys(inp, stride)
    in_idx, out_idx, ptr = _maps(inp, ("conv", k), kernel_offsets(k), stride, out_keys)
    xd, wd = x.data, w.data
    n_out = len(out_keys)
    fused = _accel.USE_NUMBA and c_in * c_out <= FUSED_MAX_WIDTH
    if fused:
        xd = np.ascontiguousarray(xd)
        out = _kernels.conv_pairs_nb(xd, np.ascontiguousarray(wd), in_idx, out_idx, ptr, n_out)
    else:
        out = _conv_forward(xd, wd, in_idx, out_idx, ptr, n_out)

    def backward(g):
        if fused:
            return _kernels.conv_pairs_backward_nb(np.ascontiguousarray(g), xd,
                                                   np.ascontiguousarray(wd), in_idx, out_idx, ptr)
        dx = np.zeros_like(xd)
        dw = np.zeros_like(wd)
        for m in range(n_off):
            s, e = ptr[m], ptr[m + 1]
            if s == e:
                continue
            gi = g[out_idx[s:e]]
            dx[in_idx[s:e]] += gi @ wd[m].T
            dw[m] = xd[in_idx[s:e]].T @ gi
        return dx, dw

    res = make(out, (x, w), backward)
    if bias is not None:
        res = res + as_tensor(bias)
    out_st = SparseTensor(out_keys, res.data if plain else res, inp.stride * stride,
                          inp.base_grid_m, inp.batch_size)
    if stride == 1:
        out_st.__dict__["_map_cache"] = inp.__dict__["_map_cache"]
        out_st.__dict__["_down_cache"] = inp.__dict__.setdefault("_down_cache", {})
    return out_st


def sparse_maxpool(inp, kernel, stride):
    """Channelwise max over window ``[out*stride, out*stride + kernel)^3``."""
    if kernel < stride:
        raise ValueError("kernel must be >= stride")
    plain = not isinstance(inp.features, Tensor)
    x = as_tensor(inp.features)
    out_keys = _out_keys(inp, stride)
    in_idx, out_idx, _ = _maps(inp, ("pool", kernel), window_offsets(kernel), stride, out_keys)
    order = np.lexsort((in_idx, out_idx))
    in_s, out_s = in_idx[order], out_idx[order]
    starts = np.searchsorted(out_s, np.arange(len(out_keys)))
    xd = x.data
    gathered = xd[in_s]
    out = np.maximum.reduceat(gathered, starts, axis=0)
    hit = gathered == np.repeat(out, np.diff(np.append(starts, len(out_s))), axis=0)
    rows = np.arange(len(in_s))[:, None]
    first = np.minimum.reduceat(np.where(hit, rows, len(in_s)), starts, axis=0)
    src = in_s[first]

    def backward(g):
        dx = np.zeros_like(xd)
        cols = np.broadcast_to(np.arange(xd.shape[1]), src.shape)
        np.add.at(dx, (src, cols), g)
        return (dx,)

    res = make(out, (x,), backward)
    return SparseTensor(out_keys, out if plain else res, inp.stride * stride,
                        inp.base_grid_m, inp.batch_size)


def global_avg_pool(inp):
    """Mean feature row per batch element -> (B, C)."""
    indptr = inp.batch_indptr()
    if np.any(np.diff(indptr) == 0):
        raise ValueError("empty batch element")
    res = F.segment_mean(inp.features, indptr)
    return res.data if not isinstance(inp.features, Tensor) else res


def apply_features(inp, fn):
    """Apply a row-wise function to the features, keeping keys and caches."""
    out = inp.replace(features=fn(inp.features))
    for name in ("_map_cache", "_down_cache"):
        out.__dict__[name] = inp.__dict__.setdefault(name, {})
    return out


def radius_neighbors(queries, support, r):
    """Closed-ball neighbours, CSR form ``(indptr, indices)``, ascending per query."""
    if r <= 0:
        raise ValueError("radius must be positive")
    return radius_search(queries, support, r)


def neighbor_lists(indptr, indices):
    return [indices[indptr[q]:indptr[q + 1]].tolist() for q in range(len(indptr) - 1)]
