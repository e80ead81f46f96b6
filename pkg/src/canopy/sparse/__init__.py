from .tensor import SparseTensor, kernel_offsets, window_offsets, canonicalize
from .ops import (grid_sample, grid_sample_mean_points, sparse_conv3d, sparse_maxpool,
                  global_avg_pool, radius_neighbors, neighbor_lists, apply_features)

__all__ = ["SparseTensor", "kernel_offsets", "window_offsets", "canonicalize", "grid_sample",
           "grid_sample_mean_points", "sparse_conv3d", "sparse_maxpool", "global_avg_pool",
           "radius_neighbors", "neighbor_lists", "apply_features"]
