"""Sparse-voxel SE-ResNet-50 style regressor.

Every convolution unit is conv -> ELU -> batch norm.  The bottleneck block is
k1 -> k3 (stride s) -> k1 (x4 width), gated channelwise by squeeze-excite
(global mean -> FC C/t -> ELU -> FC C -> sigmoid) and added to the shortcut.
"""
from dataclasses import dataclass

import numpy as np

from ..nn import functional as F
from ..nn.layers import Module, Parameter, Linear, BatchNorm, he_normal
from ..sparse import SparseTensor, grid_sample, sparse_conv3d, sparse_maxpool, global_avg_pool
from ..sparse.ops import apply_features


@dataclass
class SENetConfig:
    in_channels: int = 4
    stem_k: int = 7
    stem_out: int = 64
    stem_stride: int = 1
    pool_k: int = 3
    pool_stride: int = 3
    blocks: tuple = (3, 4, 6, 3)
    planes: tuple = (64, 128, 256, 512)
    strides: tuple = (1, 2, 2, 2)
    expansion: int = 4
    se_reduction: int = 16
    grid_m: float = 0.025
    n_out: int = 2

    @classmethod
    def tiny(cls, width=8):
        return cls(stem_out=width, blocks=(1, 1, 1, 1),
                   planes=(width, width, 2 * width, 4 * width))

    def validate(self):
        if not (len(self.blocks) == len(self.planes) == len(self.strides)):
            raise ValueError("blocks, planes and strides must have equal length")
        if min(self.planes) < 1 or self.stem_out < 1:
            raise ValueError("widths must be positive")
        if self.n_out != 2:
            raise ValueError("the regression head has exactly two outputs")
        return self

    def total_stride(self):
        return self.stem_stride * self.pool_stride * int(np.prod(self.strides))


class ConvUnit(Module):
    """Sparse conv followed by ELU and batch norm (``act=False`` skips both)."""

    def __init__(self, c_in, c_out, k, stride, rng, act=True):
        self.weight = Parameter(he_normal(rng, k ** 3 * c_in, (k ** 3, c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out), weight_decay_exempt=True)
        self.bn = BatchNorm(c_out)
        self.stride = stride
        self.act = act

    def forward(self, x):
        y = sparse_conv3d(x, self.weight, self.bias, self.stride)
        if self.act:
            return apply_features(y, lambda f: self.bn(F.elu(f)))
        return apply_features(y, self.bn)


class SEBottleneck(Module):
    def __init__(self, c_in, planes, stride, rng, expansion=4, reduction=16):
        c_out = planes * expansion
        self.conv1 = ConvUnit(c_in, planes, 1, 1, rng)
        self.conv2 = ConvUnit(planes, planes, 3, stride, rng)
        self.conv3 = ConvUnit(planes, c_out, 1, 1, rng)
        hidden = max(1, c_out // reduction)
        self.fc1 = Linear(c_out, hidden, rng)
        self.fc2 = Linear(hidden, c_out, rng)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = ConvUnit(c_in, c_out, 1, stride, rng, act=False)

    def excite(self, h):
        """Per-batch-element channel gate in (0, 1)."""
        s = global_avg_pool(h)
        return F.sigmoid(self.fc2(F.elu(self.fc1(s))))

    def forward(self, x, gate=None):
        """``gate`` overrides the excitation output (scalar or (B, C)) for tests."""
        h = self.conv3(self.conv2(self.conv1(x)))
        g = self.excite(h) if gate is None else np.broadcast_to(
            np.asarray(gate, dtype=np.float64), (h.batch_size, h.channels))
        scaled = F.mul(h.features, F.segment_broadcast(g, h.batch_indptr()))
        short = x if self.shortcut is None else self.shortcut(x)
        return apply_features(h, lambda _: F.add(scaled, short.features))


class SENet(Module):
    def __init__(self, config=None, seed=0):
        self.config = cfg = (config or SENetConfig()).validate()
        rng = np.random.default_rng(seed)
        self.stem = ConvUnit(cfg.in_channels, cfg.stem_out, cfg.stem_k, cfg.stem_stride, rng)
        c = cfg.stem_out
        self.stages = []
        for n_blocks, planes, stride in zip(cfg.blocks, cfg.planes, cfg.strides):
            stage = []
            for b in range(n_blocks):
                stage.append(SEBottleneck(c, planes, stride if b == 0 else 1, rng,
                                          cfg.expansion, cfg.se_reduction))
                c = planes * cfg.expansion
            self.stages.append(stage)
        self.head = Linear(c, cfg.n_out, rng)

    def forward(self, x):
        if len(x) == 0:
            raise ValueError("empty sparse tensor")
        if x.channels != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.channels}")
        h = self.stem(x)
        h = sparse_maxpool(h, self.config.pool_k, self.config.pool_stride)
        for stage in self.stages:
            for blk in stage:
                h = blk(h)
        return self.head(global_avg_pool(h))


def senet_input(clouds, grid_m=0.025):
    """Batch normalised clouds into one sparse tensor of per-point features."""
    coords, feats, batch = [], [], []
    for b, c in enumerate(clouds):
        coords.append(c.xyz)
        feats.append(c.point_features())
        batch.append(np.full(len(c), b, dtype=np.int64))
    return grid_sample(np.concatenate(coords), np.concatenate(feats), grid_m,
                       np.concatenate(batch), batch_size=len(clouds))


def se_block_forward(block, x, gate=None):
    return block(x, gate)


def senet50_forward(model, tensor):
    return model(tensor)
