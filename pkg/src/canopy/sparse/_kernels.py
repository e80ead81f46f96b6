"""Hot kernels of the voxel engine, each with a numba and a numpy path.

Voxel keys ``(b, i, j, k)`` are packed into one int64: 15 bits of batch index
and 16 bits per biased coordinate.  Packing is order preserving, so sorting
packed keys sorts keys lexicographically.
"""
import numpy as np

from .. import _accel
from .._accel import njit

COORD_BIAS = 1 << 15
COORD_MIN = -COORD_BIAS
COORD_MAX = COORD_BIAS - 1
BATCH_MAX = (1 << 15) - 1
_HASH_MUL = np.uint64(11400714819323198485)


def pack_keys(keys):
    keys = np.asarray(keys, dtype=np.int64)
    c = keys[:, 1:]
    if keys.size and (c.min() < COORD_MIN or c.max() > COORD_MAX):
        raise ValueError("voxel coordinate outside the packable range")
    if keys.size and (keys[:, 0].min() < 0 or keys[:, 0].max() > BATCH_MAX):
        raise ValueError("batch index outside the packable range")
    return ((keys[:, 0] << 48) | ((c[:, 0] + COORD_BIAS) << 32)
            | ((c[:, 1] + COORD_BIAS) << 16) | (c[:, 2] + COORD_BIAS))


# kernel maps ---------------------------------------------------------------
#
# For output key o and offset d, the input row is the one whose key equals
# o * stride + d.  Result: (in_idx, out_idx, off_ptr) with the pairs of offset
# number m in [off_ptr[m], off_ptr[m+1]), ascending in out_idx.

@njit
def _hash_build(packed):
    n = packed.shape[0]
    cap = 1
    while cap < 2 * n + 2:
        cap *= 2
    shift = np.uint64(64 - int(np.log2(cap)))
    table_k = np.full(cap, -1, dtype=np.int64)
    table_v = np.empty(cap, dtype=np.int64)
    mask = cap - 1
    for r in range(n):
        key = packed[r]
        h = np.int64((np.uint64(key) * np.uint64(11400714819323198485)) >> shift)
        while table_k[h] != -1:
            h = (h + 1) & mask
        table_k[h] = key
        table_v[h] = r
    return table_k, table_v, shift


@njit
def _hash_find(table_k, table_v, shift, key):
    mask = table_k.shape[0] - 1
    h = np.int64((np.uint64(key) * np.uint64(11400714819323198485)) >> shift)
    while True:
        k = table_k[h]
        if k == key:
            return table_v[h]
        if k == -1:
            return -1
        h = (h + 1) & mask


@njit
def _kernel_map_nb(in_packed, out_keys, offsets, stride):
    table_k, table_v, shift = _hash_build(in_packed)
    n_out = out_keys.shape[0]
    n_off = offsets.shape[0]
    counts = np.zeros(n_off, dtype=np.int64)
    bias = 1 << 15
    for m in range(n_off):
        for o in range(n_out):
            ok = True
            key = out_keys[o, 0] << 48
            for a in range(3):
                c = out_keys[o, a + 1] * stride + offsets[m, a]
                if c < -bias or c >= bias:
                    ok = False
                key |= (c + bias) << (32 - 16 * a)
            if ok and _hash_find(table_k, table_v, shift, key) >= 0:
                counts[m] += 1
    off_ptr = np.zeros(n_off + 1, dtype=np.int64)
    for m in range(n_off):
        off_ptr[m + 1] = off_ptr[m] + counts[m]
    total = off_ptr[n_off]
    in_idx = np.empty(total, dtype=np.int64)
    out_idx = np.empty(total, dtype=np.int64)
    p = 0
    for m in range(n_off):
        for o in range(n_out):
            ok = True
            key = out_keys[o, 0] << 48
            for a in range(3):
                c = out_keys[o, a + 1] * stride + offsets[m, a]
                if c < -bias or c >= bias:
                    ok = False
                key |= (c + bias) << (32 - 16 * a)
            if ok:
                r = _hash_find(table_k, table_v, shift, key)
                if r >= 0:
                    in_idx[p] = r
                    out_idx[p] = o
                    p += 1
    return in_idx, out_idx, off_ptr


@njit
def _floordiv(a, b):
    q = a // b
    return q


@njit
def _pack1(b, i, j, k):
    bias = 1 << 15
    return (b << 48) | ((i + bias) << 32) | ((j + bias) << 16) | (k + bias)


@njit
def _cube_map_nb(in_keys, out_keys, lo, k, stride):
    """Kernel map for the full cube of offsets ``lo + [0, k)^3`` via buckets.

    Inputs are bucketed by ``floor(key / k)``; an output's window touches at
    most 2 buckets per axis.  Pairs come out grouped by offset number and
    ascending in output index within each group.
    """
    n_in = in_keys.shape[0]
    n_out = out_keys.shape[0]
    bkey = np.empty(n_in, dtype=np.int64)
    for r in range(n_in):
        bkey[r] = _pack1(in_keys[r, 0], _floordiv(in_keys[r, 1], k),
                         _floordiv(in_keys[r, 2], k), _floordiv(in_keys[r, 3], k))
    order = np.argsort(bkey, kind="mergesort")
    sk = bkey[order]
    # unique buckets -> [start, stop)
    n_b = 0
    for r in range(n_in):
        if r == 0 or sk[r] != sk[r - 1]:
            n_b += 1
    ukeys = np.empty(n_b, dtype=np.int64)
    ustart = np.empty(n_b + 1, dtype=np.int64)
    u = 0
    for r in range(n_in):
        if r == 0 or sk[r] != sk[r - 1]:
            ukeys[u] = sk[r]
            ustart[u] = r
            u += 1
    ustart[n_b] = n_in
    table_k, table_v, shift = _hash_build(ukeys)
    n_off = k * k * k
    counts = np.zeros(n_off, dtype=np.int64)
    total = 0
    for phase in range(2):
        if phase == 1:
            off_ptr = np.zeros(n_off + 1, dtype=np.int64)
            for m in range(n_off):
                off_ptr[m + 1] = off_ptr[m] + counts[m]
            total = off_ptr[n_off]
            fill = off_ptr[:n_off].copy()
            in_idx = np.empty(total, dtype=np.int64)
            out_idx = np.empty(total, dtype=np.int64)
        for o in range(n_out):
            b = out_keys[o, 0]
            c0 = out_keys[o, 1] * stride + lo
            c1 = out_keys[o, 2] * stride + lo
            c2 = out_keys[o, 3] * stride + lo
            for bx in range(_floordiv(c0, k), _floordiv(c0 + k - 1, k) + 1):
                for by in range(_floordiv(c1, k), _floordiv(c1 + k - 1, k) + 1):
                    for bz in range(_floordiv(c2, k), _floordiv(c2 + k - 1, k) + 1):
                        u = _hash_find(table_k, table_v, shift, _pack1(b, bx, by, bz))
                        if u < 0:
                            continue
                        for s in range(ustart[u], ustart[u + 1]):
                            r = order[s]
                            dx = in_keys[r, 1] - c0
                            dy = in_keys[r, 2] - c1
                            dz = in_keys[r, 3] - c2
                            if dx < 0 or dx >= k or dy < 0 or dy >= k or dz < 0 or dz >= k:
                                continue
                            m = (dx * k + dy) * k + dz
                            if phase == 0:
                                counts[m] += 1
                            else:
                                p = fill[m]
                                in_idx[p] = r
                                out_idx[p] = o
                                fill[m] = p + 1
    return in_idx, out_idx, off_ptr


def _kernel_map_np(in_packed, out_keys, offsets, stride):
    order = np.argsort(in_packed, kind="stable")
    sorted_packed = in_packed[order]
    ins, outs, ptr = [], [], [0]
    base = out_keys.copy()
    base[:, 1:] *= stride
    rows = np.arange(out_keys.shape[0])
    for d in offsets:
        q = base.copy()
        q[:, 1:] += d
        valid = np.all((q[:, 1:] >= COORD_MIN) & (q[:, 1:] <= COORD_MAX), axis=1)
        qv = q[valid]
        packed = ((qv[:, 0] << 48) | ((qv[:, 1] + COORD_BIAS) << 32)
                  | ((qv[:, 2] + COORD_BIAS) << 16) | (qv[:, 3] + COORD_BIAS))
        pos = np.searchsorted(sorted_packed, packed)
        pos_c = np.minimum(pos, max(len(sorted_packed) - 1, 0))
        found = (pos < len(sorted_packed)) & (sorted_packed[pos_c] == packed) if len(sorted_packed) else np.zeros(len(packed), bool)
        ins.append(order[pos_c[found]])
        outs.append(rows[valid][found])
        ptr.append(ptr[-1] + int(found.sum()))
    in_idx = np.concatenate(ins) if ins else np.empty(0, np.int64)
    out_idx = np.concatenate(outs) if outs else np.empty(0, np.int64)
    return in_idx.astype(np.int64), out_idx.astype(np.int64), np.asarray(ptr, dtype=np.int64)


def _as_cube(offsets):
    """(lo, k) if offsets are the full cube lo + [0, k)^3 in lexicographic order."""
    n = len(offsets)
    k = int(round(n ** (1.0 / 3.0)))
    if k ** 3 != n or n == 0:
        return None
    lo = int(offsets[0, 0])
    r = np.arange(k) + lo
    ref = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return (lo, k) if np.array_equal(ref, offsets) else None


def kernel_map(in_keys, out_keys, offsets, stride):
    in_packed = pack_keys(in_keys)
    out_keys = np.ascontiguousarray(out_keys, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if _accel.USE_NUMBA:
        cube = _as_cube(offsets)
        if cube is not None and len(in_keys):
            pack_keys(out_keys)  # range check
            return _cube_map_nb(np.ascontiguousarray(in_keys, dtype=np.int64), out_keys,
                                np.int64(cube[0]), np.int64(cube[1]), np.int64(stride))
        return _kernel_map_nb(in_packed, out_keys, offsets, np.int64(stride))
    return _kernel_map_np(in_packed, out_keys, offsets, int(stride))


# radius search ---------------------------------------------------------------
#
# Uniform cell grid of cell size r; each query scans the 27 cells around its
# own.  Output is CSR (indptr, indices) with ascending support indices.

def _cells(points, r, origin):
    return np.floor((points - origin) / r).astype(np.int64)


@njit
def _radius_nb(queries, support, r, origin):
    n_s = support.shape[0]
    n_q = queries.shape[0]
    sc = np.empty((n_s, 3), dtype=np.int64)
    for i in range(n_s):
        for a in range(3):
            sc[i, a] = np.int64(np.floor((support[i, a] - origin[a]) / r))
    lo = np.zeros(3, dtype=np.int64)
    hi = np.zeros(3, dtype=np.int64)
    for a in range(3):
        lo[a] = sc[:, a].min() if n_s else 0
        hi[a] = sc[:, a].max() if n_s else 0
    nx = hi[0] - lo[0] + 1
    ny = hi[1] - lo[1] + 1
    nz = hi[2] - lo[2] + 1
    cell_id = np.empty(n_s, dtype=np.int64)
    for i in range(n_s):
        cell_id[i] = ((sc[i, 0] - lo[0]) * ny + (sc[i, 1] - lo[1])) * nz + (sc[i, 2] - lo[2])
    order = np.argsort(cell_id, kind="mergesort")
    sorted_ids = cell_id[order]
    r2 = r * r
    counts = np.zeros(n_q, dtype=np.int64)
    buf = np.empty(n_s, dtype=np.int64)
    # first pass counts, second pass fills
    indptr = np.zeros(n_q + 1, dtype=np.int64)
    for phase in range(2):
        if phase == 1:
            for q in range(n_q):
                indptr[q + 1] = indptr[q] + counts[q]
            indices = np.empty(indptr[n_q], dtype=np.int64)
        else:
            indices = np.empty(0, dtype=np.int64)
        for q in range(n_q):
            m = 0
            qc0 = np.int64(np.floor((queries[q, 0] - origin[0]) / r))
            qc1 = np.int64(np.floor((queries[q, 1] - origin[1]) / r))
            qc2 = np.int64(np.floor((queries[q, 2] - origin[2]) / r))
            for dx in range(-1, 2):
                cx = qc0 + dx - lo[0]
                if cx < 0 or cx >= nx:
                    continue
                for dy in range(-1, 2):
                    cy = qc1 + dy - lo[1]
                    if cy < 0 or cy >= ny:
                        continue
                    for dz in range(-1, 2):
                        cz = qc2 + dz - lo[2]
                        if cz < 0 or cz >= nz:
                            continue
                        cid = (cx * ny + cy) * nz + cz
                        s = np.searchsorted(sorted_ids, cid)
                        while s < n_s and sorted_ids[s] == cid:
                            j = order[s]
                            d0 = support[j, 0] - queries[q, 0]
                            d1 = support[j, 1] - queries[q, 1]
                            d2 = support[j, 2] - queries[q, 2]
                            if d0 * d0 + d1 * d1 + d2 * d2 <= r2:
                                buf[m] = j
                                m += 1
                            s += 1
            if phase == 0:
                counts[q] = m
            else:
                found = np.sort(buf[:m])
                indices[indptr[q]:indptr[q] + m] = found
    return indptr, indices


def _radius_np(queries, support, r, origin):
    n_q, n_s = len(queries), len(support)
    if n_s == 0 or n_q == 0:
        return np.zeros(n_q + 1, np.int64), np.empty(0, np.int64)
    sc = _cells(support, r, origin)
    qc = _cells(queries, r, origin)
    lo = sc.min(axis=0)
    dims = sc.max(axis=0) - lo + 1
    cid = ((sc[:, 0] - lo[0]) * dims[1] + (sc[:, 1] - lo[1])) * dims[2] + (sc[:, 2] - lo[2])
    order = np.argsort(cid, kind="stable")
    sorted_ids = cid[order]
    r2 = r * r
    qs, ss = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                c = qc + np.array([dx, dy, dz]) - lo
                ok = np.all((c >= 0) & (c < dims), axis=1)
                qi = np.nonzero(ok)[0]
                c = c[ok]
                ids = (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]
                start = np.searchsorted(sorted_ids, ids, side="left")
                stop = np.searchsorted(sorted_ids, ids, side="right")
                cnt = stop - start
                if cnt.sum() == 0:
                    continue
                rep_q = np.repeat(qi, cnt)
                within = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                cand = order[np.repeat(start, cnt) + within]
                d = support[cand] - queries[rep_q]
                keep = (d * d).sum(axis=1) <= r2
                qs.append(rep_q[keep])
                ss.append(cand[keep])
    q_all = np.concatenate(qs) if qs else np.empty(0, np.int64)
    s_all = np.concatenate(ss) if ss else np.empty(0, np.int64)
    o = np.lexsort((s_all, q_all))
    q_all, s_all = q_all[o], s_all[o]
    indptr = np.zeros(n_q + 1, dtype=np.int64)
    np.add.at(indptr, q_all + 1, 1)
    return np.cumsum(indptr), s_all.astype(np.int64)


def radius_search(queries, support, r):
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    support = np.ascontiguousarray(support, dtype=np.float64)
    if len(support) == 0 or len(queries) == 0:
        return np.zeros(len(queries) + 1, np.int64), np.empty(0, np.int64)
    origin = support.min(axis=0)
    if _accel.USE_NUMBA:
        return _radius_nb(queries, support, float(r), origin)
    return _radius_np(queries, support, float(r), origin)


# convolution over kernel-map pairs ------------------------------------------
#
# Used for narrow layers, where per-offset BLAS calls are dominated by the
# gather/scatter overhead.

@njit
def conv_pairs_nb(x, w, in_idx, out_idx, ptr, n_out):
    n_off, c_in, c_out = w.shape
    out = np.zeros((n_out, c_out))
    for m in range(n_off):
        for p in range(ptr[m], ptr[m + 1]):
            i = in_idx[p]
            o = out_idx[p]
            for a in range(c_in):
                v = x[i, a]
                if v != 0.0:
                    for b in range(c_out):
                        out[o, b] += v * w[m, a, b]
    return out


@njit
def conv_pairs_backward_nb(g, x, w, in_idx, out_idx, ptr):
    n_off, c_in, c_out = w.shape
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for m in range(n_off):
        for p in range(ptr[m], ptr[m + 1]):
            i = in_idx[p]
            o = out_idx[p]
            for a in range(c_in):
                acc = 0.0
                xa = x[i, a]
                for b in range(c_out):
                    gb = g[o, b]
                    acc += gb * w[m, a, b]
                    dw[m, a, b] += xa * gb
                dx[i, a] += acc
    return dx, dw
