"""PointNet regressor: shared per-point maps, channelwise max, 512-256-128 head."""
from dataclasses import dataclass

import numpy as np

from ..nn import functional as F
from ..nn.layers import Module, Parameter, Linear, BatchNorm


@dataclass
class PointNetConfig:
    in_channels: int = 4            # extra per-point features besides xyz
    widths: tuple = (64, 64, 64, 128, 1024)
    input_transform: bool = True
    feature_transform: bool = True
    tnet_widths: tuple = (64, 128, 1024)
    tnet_head: tuple = (512, 256)
    head: tuple = (512, 256, 128)
    n_out: int = 2

    @classmethod
    def tiny(cls, width=8):
        return cls(widths=(width, width, width, 2 * width, 4 * width),
                   tnet_widths=(width, 2 * width, 4 * width), tnet_head=(2 * width, width),
                   head=(4 * width, 2 * width, width))

    def validate(self):
        if len(self.widths) != 5:
            raise ValueError("widths needs five entries (two before, three after the feature transform)")
        if self.n_out != 2:
            raise ValueError("the regression head has exactly two outputs")
        return self


class SharedMLP(Module):
    def __init__(self, widths, d_in, rng):
        self.layers, self.bns = [], []
        for w in widths:
            self.layers.append(Linear(d_in, w, rng))
            self.bns.append(BatchNorm(w))
            d_in = w

    def forward(self, x):
        for lin, bn in zip(self.layers, self.bns):
            x = F.relu(bn(lin(x)))
        return x


class TNet(Module):
    """Predicts a k x k transform per cloud, initialised to the identity."""

    def __init__(self, k, d_in, widths, head, rng):
        self.k = k
        self.mlp = SharedMLP(widths, d_in, rng)
        self.fcs = SharedMLP(head, widths[-1], rng)
        self.out = Linear(head[-1], k * k, rng)
        self.out.weight.data[...] = 0.0
        self.out.bias = Parameter(np.eye(k).ravel(), weight_decay_exempt=True)

    def forward(self, x, indptr):
        g = F.segment_max(self.mlp(x), indptr)
        m = self.out(self.fcs(g))
        return m.reshape(len(indptr) - 1, self.k, self.k)


class PointNet(Module):
    def __init__(self, config=None, seed=0):
        self.config = cfg = (config or PointNetConfig()).validate()
        rng = np.random.default_rng(seed)
        d_in = 3 + cfg.in_channels
        self.tnet_in = TNet(3, 3, cfg.tnet_widths, cfg.tnet_head, rng) if cfg.input_transform else None
        self.mlp1 = SharedMLP(cfg.widths[:2], d_in, rng)
        c = cfg.widths[1]
        self.tnet_feat = TNet(c, c, cfg.tnet_widths, cfg.tnet_head, rng) if cfg.feature_transform else None
        self.mlp2 = SharedMLP(cfg.widths[2:], c, rng)
        self.head = SharedMLP(cfg.head, cfg.widths[-1], rng)
        self.out = Linear(cfg.head[-1], cfg.n_out, rng)

    def forward(self, clouds):
        return self.forward_arrays(*pointnet_input(clouds))

    def forward_arrays(self, xyz, feats, indptr):
        if self.tnet_in is not None:
            xyz = F.segment_transform(xyz, self.tnet_in(xyz, indptr), indptr)
        x = self.mlp1(F.concat([xyz, feats], axis=1))
        if self.tnet_feat is not None:
            x = F.segment_transform(x, self.tnet_feat(x, indptr), indptr)
        x = self.mlp2(x)
        g = F.segment_max(x, indptr)
        return self.out(self.head(g))


def canonical_points(xyz, feats):
    """Lexicographic row order so the network never sees the input order."""
    cols = [feats[:, j] for j in range(feats.shape[1] - 1, -1, -1)]
    cols += [xyz[:, j] for j in (2, 1, 0)]
    return np.lexsort(cols)


def pointnet_input(clouds):
    xyz, feats, sizes = [], [], []
    for c in clouds:
        if len(c) < 1:
            raise ValueError("cloud must contain at least one point")
        f = c.point_features()
        order = canonical_points(c.xyz, f)
        xyz.append(c.xyz[order])
        feats.append(f[order])
        sizes.append(len(c))
    return np.concatenate(xyz), np.concatenate(feats), np.cumsum([0] + sizes)


def pointnet_forward(model, clouds):
    return model(clouds)
