"""Kernel point convolution and a small residual KP-CNN regressor."""
from dataclasses import dataclass

import numpy as np

from ..nn.autograd import Tensor, as_tensor, make
from ..nn import functional as F
from ..nn.layers import Module, Parameter, Linear, BatchNorm, he_normal
from ..sparse import grid_sample_mean_points, radius_neighbors

RIGID_EXTENT = 0.66


def kernel_influence(y, kernel_point, sigma):
    """Linear correlation max(0, 1 - |y - x_k| / sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = np.linalg.norm(np.asarray(y, float) - np.asarray(kernel_point, float), axis=-1)
    return np.maximum(0.0, 1.0 - d / sigma)


def _repulsion_energy(p):
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    iu = np.triu_indices(len(p), 1)
    return np.sum(1.0 / d[iu])


def rigid_kernel_points(K, r, seed=0, n_iter=2000):
    """Fixed kernel disposition: one point at the centre, K-1 spread by repulsion.

    The free points minimise the inverse-distance energy (centre included)
    subject to staying in the ball of radius 0.66 r.  Sorted by (z, y, x).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    radius = RIGID_EXTENT * r
    if K == 1:
        return np.zeros((1, 3))
    rng = np.random.default_rng(seed)
    free = rng.normal(size=(K - 1, 3))
    free *= (radius * rng.uniform(0.3, 1.0, size=(K - 1, 1)) ** (1 / 3)) / np.linalg.norm(free, axis=1, keepdims=True)
    step = 0.05 * radius
    pts = np.vstack([np.zeros((1, 3)), free])
    energy = _repulsion_energy(pts)
    for _ in range(n_iter):
        diff = pts[:, None] - pts[None]
        d = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(d, np.inf)
        force = (diff / d[..., None] ** 3).sum(axis=1)[1:]
        norm = np.linalg.norm(force, axis=1, keepdims=True)
        trial = pts.copy()
        trial[1:] += step * force / np.maximum(norm, 1e-300)
        rad = np.linalg.norm(trial[1:], axis=1, keepdims=True)
        trial[1:] *= np.minimum(1.0, radius / np.maximum(rad, 1e-300))
        e = _repulsion_energy(trial)
        if e < energy:
            pts, energy = trial, e
            step *= 1.1
        else:
            step *= 0.5
        if step < 1e-10 * radius:
            break
    order = np.lexsort((pts[:, 0], pts[:, 1], pts[:, 2]))
    return pts[order]


def neighbor_pairs(queries, support, r):
    """Pairs (query, support) in the closed ball, grouped by query, supports ascending."""
    indptr, idx = radius_neighbors(queries, support, r)
    q = np.repeat(np.arange(len(queries)), np.diff(indptr))
    return q, idx


def influence_matrix(queries, support, pair_q, pair_s, kernel_points, sigma):
    y = support[pair_s] - queries[pair_q]
    d = np.linalg.norm(y[:, None, :] - kernel_points[None], axis=-1)
    return np.maximum(0.0, 1.0 - d / sigma)


def kpconv_pairs(features, pair_q, pair_s, H, weights, n_queries):
    """Core op: out[q] = sum over pairs (q, s) of sum_k H[p, k] * W_k^T f_s.

    ``weights`` is (K, D_in, D_out).  Queries without pairs give zero rows.
    """
    f, w = as_tensor(features), as_tensor(weights)
    fd, wd = f.data, w.data
    K, d_in, d_out = wd.shape
    n_pairs = len(pair_q)
    A = np.zeros((n_queries, K, d_in))
    if n_pairs:
        contrib = H[:, :, None] * fd[pair_s][:, None, :]
        starts = np.nonzero(np.r_[True, pair_q[1:] != pair_q[:-1]])[0]
        A[pair_q[starts]] = np.add.reduceat(contrib, starts, axis=0)
    A_flat = A.reshape(n_queries, K * d_in)
    W_flat = wd.reshape(K * d_in, d_out)
    out = A_flat @ W_flat

    def backward(g):
        dW = (A_flat.T @ g).reshape(wd.shape)
        dA = (g @ W_flat.T).reshape(n_queries, K, d_in)
        df = np.zeros_like(fd)
        if n_pairs:
            per_pair = np.einsum("pk,pkd->pd", H, dA[pair_q])
            np.add.at(df, pair_s, per_pair)
        return df, dW

    return make(out, (f, w), backward)


def kpconv_apply(points, features, queries, kernel_points, weights, r, sigma):
    """Kernel point convolution of (points, features) evaluated at ``queries``."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    kernel_points = np.asarray(kernel_points, dtype=np.float64)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pq, ps = neighbor_pairs(queries, points, r)
    H = influence_matrix(queries, points, pq, ps, kernel_points, sigma)
    res = kpconv_pairs(features, pq, ps, H, weights, len(queries))
    plain = not isinstance(features, Tensor) and not isinstance(weights, Tensor)
    return res.data if plain else res


@dataclass
class KPConvConfig:
    in_channels: int = 4
    K: int = 15
    grid_m: float = 0.025
    radius_factor: float = 2.5
    sigma_factor: float = 1.0
    widths: tuple = (64, 128, 256, 512, 1024)
    blocks: tuple = (1, 2, 2, 2, 2)
    n_out: int = 2
    kernel_seed: int = 0

    @classmethod
    def tiny(cls, width=8):
        return cls(widths=(width, 2 * width), blocks=(1, 1))

    def validate(self):
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("widths and blocks must have equal, non-zero length")
        if self.sigma_factor <= 0 or self.radius_factor <= 0 or self.grid_m <= 0:
            raise ValueError("grid, radius and sigma must be positive")
        return self


class KPConvLayer(Module):
    def __init__(self, d_in, d_out, K, rng):
        self.weight = Parameter(he_normal(rng, K * d_in, (K, d_in, d_out)))
        self.K = K

    def forward(self, feats, level_pairs):
        pq, ps, H, n_q = level_pairs
        return kpconv_pairs(feats, pq, ps, H, self.weight, n_q)


class ResnetBlock(Module):
    """unary -> KPConv -> unary, with identity shortcut."""

    def __init__(self, width, K, rng):
        mid = max(1, width // 2)
        self.down = Linear(width, mid, rng)
        self.bn_down = BatchNorm(mid)
        self.conv = KPConvLayer(mid, mid, K, rng)
        self.bn_conv = BatchNorm(mid)
        self.up = Linear(mid, width, rng)
        self.bn_up = BatchNorm(width)

    def forward(self, x, pairs):
        h = F.elu(self.bn_down(self.down(x)))
        h = F.elu(self.bn_conv(self.conv(h, pairs)))
        h = self.bn_up(self.up(h))
        return F.elu(h + x)


class KPCNN(Module):
    def __init__(self, config=None, seed=0):
        self.config = cfg = (config or KPConvConfig()).validate()
        rng = np.random.default_rng(seed)
        self.kernel_points = [rigid_kernel_points(cfg.K, cfg.radius_factor * cfg.grid_m * 2 ** s,
                                                  cfg.kernel_seed)
                              for s in range(len(cfg.widths))]
        w0 = cfg.widths[0]
        self.stem = KPConvLayer(cfg.in_channels, w0, cfg.K, rng)
        self.stem_bn = BatchNorm(w0)
        self.down_convs, self.down_bns, self.stages = [], [], []
        for s, (w, nb) in enumerate(zip(cfg.widths, cfg.blocks)):
            if s > 0:
                self.down_convs.append(KPConvLayer(cfg.widths[s - 1], w, cfg.K, rng))
                self.down_bns.append(BatchNorm(w))
            self.stages.append([ResnetBlock(w, cfg.K, rng) for _ in range(nb)])
        self.head = Linear(cfg.widths[-1], cfg.n_out, rng)

    # geometry ------------------------------------------------------------------
    def plan(self, cloud):
        """Pooled point sets and neighbourhoods of one normalised cloud."""
        cfg = self.config
        if len(cloud) < 1:
            raise ValueError("cloud must contain at least one point")
        pts, feats, _ = grid_sample_mean_points(cloud.xyz, cloud.point_features(), cfg.grid_m)
        levels = [pts]
        for s in range(1, len(cfg.widths)):
            levels.append(grid_sample_mean_points(levels[-1], np.zeros((len(levels[-1]), 0)),
                                                  cfg.grid_m * 2 ** s)[0])
        same, down = [], []
        for s, p in enumerate(levels):
            r = cfg.radius_factor * cfg.grid_m * 2 ** s
            sigma = cfg.sigma_factor * cfg.grid_m * 2 ** s
            kp = self.kernel_points[s]
            q, i = neighbor_pairs(p, p, r)
            same.append((q, i, influence_matrix(p, p, q, i, kp, sigma), len(p)))
            if s > 0:
                prev = levels[s - 1]
                r0 = cfg.radius_factor * cfg.grid_m * 2 ** (s - 1)
                sg0 = cfg.sigma_factor * cfg.grid_m * 2 ** (s - 1)
                q, i = neighbor_pairs(p, prev, r0)
                down.append((q, i, influence_matrix(p, prev, q, i, self.kernel_points[s - 1], sg0), len(p)))
        return {"features": feats, "same": same, "down": down, "sizes": [len(p) for p in levels]}

    @staticmethod
    def merge_plans(plans):
        def cat(items, q_off, s_off):
            qs, ss, hs, n = [], [], [], 0
            for (q, i, H, nq), qo, so in zip(items, q_off, s_off):
                qs.append(q + qo)
                ss.append(i + so)
                hs.append(H)
                n += nq
            return np.concatenate(qs), np.concatenate(ss), np.concatenate(hs), n

        n_levels = len(plans[0]["sizes"])
        offs = [np.cumsum([0] + [p["sizes"][s] for p in plans]) for s in range(n_levels)]
        merged = {
            "features": np.concatenate([p["features"] for p in plans]),
            "same": [cat([p["same"][s] for p in plans], offs[s], offs[s]) for s in range(n_levels)],
            "down": [cat([p["down"][s - 1] for p in plans], offs[s], offs[s - 1])
                     for s in range(1, n_levels)],
            "indptr": offs[-1],
        }
        return merged

    def forward(self, clouds):
        plan = self.merge_plans([self.plan(c) for c in clouds])
        return self.forward_plan(plan)

    def forward_plan(self, plan):
        x = F.elu(self.stem_bn(self.stem(plan["features"], plan["same"][0])))
        for s, blocks in enumerate(self.stages):
            if s > 0:
                x = F.elu(self.down_bns[s - 1](self.down_convs[s - 1](x, plan["down"][s - 1])))
            for blk in blocks:
                x = blk(x, plan["same"][s])
        pooled = F.segment_mean(x, plan["indptr"])
        return self.head(pooled)
