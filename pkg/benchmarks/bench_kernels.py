"""Time the hot kernels on the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--points 20000]

Each kernel runs on both backends with identical inputs.  Integer outputs
must match exactly and float outputs to rounding; the script exits 1 on a
mismatch.
"""
import argparse
import sys
import time

import numpy as np

from canopy import _accel
from canopy.baselines._kernels import best_split
from canopy.nn import functional as F
from canopy.nn.autograd import Tensor
from canopy.sparse import SparseTensor, canonicalize, sparse_conv3d
from canopy.sparse._kernels import kernel_map, radius_search


def _cube(k):
    r = np.arange(k) - k // 2
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def make_cases(n_points, rng):
    # a thin canopy-like shell so the voxel set is sparse
    xy = rng.uniform(0, 600, size=(n_points, 2))
    z = 40 + 10 * np.sin(xy[:, :1] / 50.0) + rng.normal(0, 2, size=(n_points, 1))
    vox = np.unique(np.floor(np.column_stack([xy, z])).astype(np.int64), axis=0)
    keys4 = np.column_stack([np.zeros(len(vox), np.int64), vox])
    keys, _ = canonicalize(keys4, np.zeros((len(keys4), 1)))
    offsets = _cube(3)
    pts = rng.uniform(-1, 1, size=(n_points // 4, 3))
    X = rng.normal(size=(2000, 27))
    y = X[:, 0] * 2 + rng.normal(size=2000)
    rows = np.arange(2000)
    feats = np.arange(27)
    c = 8
    st_feats = rng.normal(size=(len(keys), c))
    w = rng.normal(size=(27, c, c)) * 0.1
    d = rng.normal(size=(len(keys), 32))
    gamma, beta = np.ones(32), np.zeros(32)

    def conv():
        f = Tensor(st_feats, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        out = sparse_conv3d(SparseTensor(keys, f, batch_size=1), wt, None, 1).features
        out.sum().backward()
        return out.data, f.grad, wt.grad

    def bn():
        x = Tensor(d, requires_grad=True)
        out = F.batch_norm(x, Tensor(gamma), Tensor(beta), np.zeros(32), np.ones(32), True)
        out.sum().backward()
        return out.data, x.grad

    return {
        "kernel_map": lambda: kernel_map(keys, keys, offsets, 1),
        "radius_search": lambda: radius_search(pts, pts, 0.08),
        "best_split": lambda: best_split(X, y, rows, feats, 5),
        "sparse_conv3d_fwd_bwd": conv,
        "elu": lambda: F.elu(Tensor(d)).data,
        "batch_norm_train_fwd_bwd": bn,
    }


def _flat(result):
    if isinstance(result, (tuple, list)):
        return [a for r in result for a in _flat(r)]
    return [np.asarray(result)]


def _same(a, b):
    for x, y in zip(_flat(a), _flat(b)):
        if x.shape != y.shape:
            return False
        if np.issubdtype(x.dtype, np.integer):
            if not np.array_equal(x, y):
                return False
        elif not np.allclose(x, y, rtol=1e-9, atol=1e-9):
            return False
    return True


def time_once(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=20000)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 0
    cases = make_cases(args.points, np.random.default_rng(0))
    ok = True
    print(f"{'kernel':26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  match")
    for name, fn in cases.items():
        _accel.use_numba(True)
        ref_nb = fn()  # also triggers compilation
        t_nb = time_once(fn, args.repeat)
        _accel.use_numba(False)
        ref_np = fn()
        t_np = time_once(fn, args.repeat)
        match = _same(ref_nb, ref_np)
        ok &= match
        print(f"{name:26s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f}x  {'yes' if match else 'NO'}")
    _accel.use_numba(True)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
