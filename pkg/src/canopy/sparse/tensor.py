from dataclasses import dataclass
from itertools import product
from typing import Any

import numpy as np

from ..nn.autograd import Tensor
from ._kernels import pack_keys


@dataclass
class SparseTensor:
    """Integer voxel keys ``(b, i, j, k)`` with one feature row per key.

    ``features`` is either a plain array or an autodiff :class:`Tensor`.
    Keys are kept sorted lexicographically and unique.
    """

    keys: np.ndarray
    features: Any
    stride: int = 1
    base_grid_m: float = 1.0
    batch_size: int = 1

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 4)
        if len(self.keys) != _rows(self.features):
            raise ValueError("feature row count does not match key count")

    def __len__(self):
        return len(self.keys)

    @property
    def F(self):
        """Feature values as a numpy array."""
        return self.features.data if isinstance(self.features, Tensor) else np.asarray(self.features)

    @property
    def channels(self):
        return self.F.shape[1]

    @property
    def grid_m(self):
        """Physical cell size at this stride level."""
        return self.base_grid_m * self.stride

    def batch_indptr(self):
        b = self.keys[:, 0]
        return np.searchsorted(b, np.arange(self.batch_size + 1), side="left")

    def is_canonical(self):
        p = pack_keys(self.keys)
        return bool(np.all(np.diff(p) > 0))

    def replace(self, keys=None, features=None, stride=None):
        return SparseTensor(self.keys if keys is None else keys,
                            self.features if features is None else features,
                            self.stride if stride is None else stride,
                            self.base_grid_m, self.batch_size)


def _rows(f):
    return f.shape[0]


def canonicalize(keys, features):
    """Sort rows by key; duplicate keys are an error."""
    keys = np.asarray(keys, dtype=np.int64)
    order = np.argsort(pack_keys(keys), kind="stable")
    keys = keys[order]
    if len(keys) > 1 and np.any(np.all(keys[1:] == keys[:-1], axis=1)):
        raise ValueError("duplicate voxel keys")
    feats = features[order] if not isinstance(features, Tensor) else features
    return keys, feats


def kernel_offsets(k):
    """Offsets of a centred cubic kernel of size ``k`` in lexicographic order."""
    if k < 1:
        raise ValueError("kernel size must be >= 1")
    h = k // 2
    rng = range(-h, k - h)
    return np.array(list(product(rng, rng, rng)), dtype=np.int64)


def window_offsets(k):
    """Offsets ``[0, k)^3`` used by pooling windows anchored at ``out * stride``."""
    rng = range(k)
    return np.array(list(product(rng, rng, rng)), dtype=np.int64)
