"""Central finite-difference checks of the reverse-mode gradients.

The error of one entry is ``|a - n| / max(|a|, |n|, floor)`` with analytic
``a`` and numerical ``n``.  ``floor`` is 1e-3 of the largest numerical
gradient over all checked tensors (and at least 1e-8): entries far below the
gradient scale, such as the exactly-zero gradient of a bias feeding a
training-mode batch norm, are judged against that scale instead of against
finite-difference round-off.
"""
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, as_tensor
from . import functional as F
from .layers import Parameter

H = 1e-5
TOL = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int

    @property
    def passed(self):
        return self.max_rel_error < TOL


def _scalarize(out, rng_seed=1234):
    """Random fixed projection of a non-scalar output to a scalar loss."""
    out = as_tensor(out)
    if out.data.size == 1:
        return out.reshape(()) if out.data.ndim else out
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return F.mul(out, w).sum()


def check(name, build, tensors, h=H, max_entries=None, seed=0):
    """Compare analytic and numerical gradients of ``build()`` w.r.t. ``tensors``.

    ``build`` re-evaluates the function from the current ``.data`` of the
    tensors.  ``max_entries`` caps the probed coordinates per tensor (chosen
    at random with ``seed``).
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = _scalarize(build())
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    pairs = []
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = float(_scalarize(build()).data)
            flat[i] = old - h
            down = float(_scalarize(build()).data)
            flat[i] = old
            num[j] = (up - down) / (2.0 * h)
        pairs.append((a.reshape(-1)[idx], num))
    scale = max((np.max(np.abs(n), initial=0.0) for _, n in pairs), default=0.0)
    floor = max(1e-3 * scale, 1e-8)
    worst, count = 0.0, 0
    for an, num in pairs:
        err = np.abs(an - num) / np.maximum(np.maximum(np.abs(an), np.abs(num)), floor)
        worst = max(worst, float(err.max(initial=0.0)))
        count += len(num)
    return GradCheckResult(name, worst, count)


def _t(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# suite -----------------------------------------------------------------------

def _primitive_cases():
    rng = np.random.default_rng(0)
    cases = []

    x, w, b = _t(rng, 5, 4), _t(rng, 4, 3), _t(rng, 3)
    cases.append(("fully_connected", lambda: F.linear(x, w, b), [x, w, b]))

    xr = Tensor(rng.normal(size=(6, 4)) + np.sign(rng.normal(size=(6, 4))) * 0.1, requires_grad=True)
    cases.append(("relu", lambda: F.relu(xr), [xr]))
    xe = _t(rng, 6, 4)
    cases.append(("elu", lambda: F.elu(xe), [xe]))
    xs = Tensor(rng.normal(scale=3.0, size=(6, 4)), requires_grad=True)
    cases.append(("sigmoid", lambda: F.sigmoid(xs), [xs]))

    xb, g, be = _t(rng, 7, 3), _t(rng, 3), _t(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    cases.append(("batch_norm_train",
                  lambda: F.batch_norm(xb, g, be, rm.copy(), rv.copy(), True), [xb, g, be]))
    rm2, rv2 = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    cases.append(("batch_norm_eval", lambda: F.batch_norm(xb, g, be, rm2, rv2, False), [xb, g, be]))

    indptr = np.array([0, 3, 4, 8])
    xm = _t(rng, 8, 3)
    cases.append(("max_reduce", lambda: F.max_reduce(xm, indptr), [xm]))
    cases.append(("mean_reduce", lambda: F.mean_reduce(xm, indptr), [xm]))
    v = _t(rng, 3, 3)
    cases.append(("segment_broadcast", lambda: F.segment_broadcast(v, indptr), [v]))
    cases.append(("gather_rows", lambda: F.gather_rows(xm, np.array([0, 2, 2, 7, 5])), [xm]))
    y1, y2 = _t(rng, 4, 2), _t(rng, 4, 3)
    cases.append(("concat", lambda: F.concat([y1, y2], axis=1), [y1, y2]))
    mats = _t(rng, 3, 3, 2)
    cases.append(("segment_transform", lambda: F.segment_transform(xm, mats, indptr), [xm, mats]))

    p = _t(rng, 10)
    target = p.data + np.linspace(-3.0, 3.0, 10)
    cases.append(("smooth_l1", lambda: F.smooth_l1(p, target), [p]))
    # either side of the knee |d| = beta
    pk = Tensor(np.array([1.0 - 1e-3, 1.0 + 1e-3, -1.0 + 1e-3, -1.0 - 1e-3]), requires_grad=True)
    cases.append(("smooth_l1_knee", lambda: F.smooth_l1(pk, np.zeros(4)), [pk]))

    a, m = _t(rng, 4, 3), _t(rng, 3, 4)
    cases.append(("matmul_add_mul", lambda: F.mul(F.linear(a, m), 0.5) + a.sum(), [a, m]))
    return cases


def _sparse_cases():
    from ..sparse import SparseTensor, canonicalize, sparse_conv3d, sparse_maxpool, global_avg_pool
    rng = np.random.default_rng(1)
    occ = np.argwhere(rng.uniform(size=(2, 5, 5, 5)) < 0.35)
    keys, feats = canonicalize(occ, rng.normal(size=(len(occ), 2)))
    cases = []
    for k, s in ((1, 1), (3, 1), (3, 2)):
        f = Tensor(feats.copy(), requires_grad=True)
        w = _t(rng, k ** 3, 2, 3)
        bias = _t(rng, 3)

        def build(f=f, w=w, bias=bias, k=k, s=s):
            st = SparseTensor(keys, f, batch_size=2)
            return sparse_conv3d(st, w, bias, s).features
        cases.append((f"sparse_conv3d_k{k}_s{s}", build, [f, w, bias]))
    fp = Tensor(feats.copy(), requires_grad=True)
    cases.append(("sparse_maxpool",
                  lambda: sparse_maxpool(SparseTensor(keys, fp, batch_size=2), 2, 2).features, [fp]))
    cases.append(("global_avg_pool",
                  lambda: global_avg_pool(SparseTensor(keys, fp, batch_size=2)), [fp]))
    return cases


def _kpconv_case():
    from ..models.kpconv import influence_matrix, kpconv_pairs, neighbor_pairs, rigid_kernel_points
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(20, 3))
    q = pts[:6]
    kp = rigid_kernel_points(5, 0.9, seed=0, n_iter=200)
    pq, ps = neighbor_pairs(q, pts, 0.9)
    Hm = influence_matrix(q, pts, pq, ps, kp, 0.5)
    f, w = _t(rng, 20, 2), _t(rng, 5, 2, 3)
    return [("kpconv", lambda: kpconv_pairs(f, pq, ps, Hm, w, len(q)), [f, w])]


def _se_block_case():
    from ..models.senet import SEBottleneck
    from ..sparse import SparseTensor, canonicalize
    rng = np.random.default_rng(3)
    occ = np.argwhere(rng.uniform(size=(2, 4, 4, 4)) < 0.4)
    keys, feats = canonicalize(occ, rng.normal(size=(len(occ), 4)))
    blk = SEBottleneck(4, 2, 1, rng, expansion=2, reduction=2)
    f = Tensor(feats, requires_grad=True)
    params = [f] + blk.parameters()
    return [("se_block", lambda: blk(SparseTensor(keys, f, batch_size=2)).features, params)]


def _model_cases():
    from ..core import PointCloud
    from ..models import build_model, forward_clouds, tiny_config
    rng = np.random.default_rng(4)

    def cloud(n, gap):
        xyz = np.column_stack([rng.uniform(-1, 1, (n, 2)), rng.uniform(0, 0.4, n)])
        cnt = rng.integers(1, 3, n)
        return PointCloud(xyz, np.minimum(rng.integers(1, 3, n), cnt), cnt, "g", gap)

    cases = []
    for kind, n, width in (("minkowski", 60, 4), ("kpconv", 40, 4), ("pointnet", 25, 4)):
        clouds = [cloud(n, 0.5), cloud(n + 7, -1.0)]
        model = build_model(kind, tiny_config(kind, width), seed=0)
        if kind == "minkowski":
            # coarser grid so neighbourhoods are populated in a small cloud
            model.config.grid_m = 0.1
        elif kind == "kpconv":
            model.config.grid_m = 0.1
        target = np.array([[0.3, -0.2], [1.0, 0.5]])
        cases.append((f"model_{kind}",
                      lambda model=model, clouds=clouds, target=target:
                      F.smooth_l1(forward_clouds(model, clouds), target),
                      model.parameters()))
    return cases


def all_cases():
    return _primitive_cases() + _sparse_cases() + _kpconv_case() + _se_block_case() + _model_cases()


def run_all(max_entries=8, seed=0):
    results = []
    for name, build, tensors in all_cases():
        cap = max_entries if name.startswith(("model_", "se_block")) else None
        results.append(check(name, build, tensors, max_entries=cap, seed=seed))
    return results
