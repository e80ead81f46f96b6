"""Random-forest regression with per-tree row subsampling and OOB tuning."""
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import best_split

OOB_GRID = {
    "feature_ratio": [round(0.1 * i, 1) for i in range(1, 11)],
    "sample_ratio": [round(0.1 * i, 1) for i in range(1, 11)],
    "max_depth": list(range(5, 21)) + [None],
    "min_leaf": [1, 2, 4, 8, 16],
}
TUNED_PARAMS = {"feature_ratio": 0.9, "sample_ratio": 0.2, "max_depth": 11, "min_leaf": 6}
DEFAULT_N_TREES = 200


@dataclass(frozen=True)
class ForestParams:
    feature_ratio: float = 0.9
    sample_ratio: float = 0.2
    max_depth: int = None  # None = unlimited
    min_leaf: int = 6

    def validate(self):
        if not 0 < self.feature_ratio <= 1 or not 0 < self.sample_ratio <= 1:
            raise ValueError("ratios must lie in (0, 1]")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        return self


@dataclass
class Tree:
    feature: np.ndarray    # -1 for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    depth: int

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            idx = np.nonzero(inner)[0]
            go_left = X[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])


@dataclass
class RandomForestModel:
    trees: list
    params: ForestParams
    seeds: list
    in_bag: np.ndarray            # (n_trees, n_rows) bool, training-row order
    oob_error: float = float("nan")
    oob_skipped: int = 0
    n_features: int = 0
    split_counts: np.ndarray = field(default=None, repr=False)

    def tree_predictions(self, X):
        return np.stack([t.predict(X) for t in self.trees])

    def predict(self, X):
        # sorted summation: prediction does not depend on tree order
        P = np.sort(self.tree_predictions(X), axis=0)
        return _ordered_mean(P)


def _ordered_mean(P):
    acc = np.zeros(P.shape[1])
    for row in P:
        acc += row
    return acc / P.shape[0]


def _grow_tree(X, y, rows, params, rng, n_features):
    k = max(1, math.ceil(params.feature_ratio * n_features))
    feature, threshold, left, right, value, n_samples = [], [], [], [], [], []
    max_depth = math.inf if params.max_depth is None else params.max_depth
    depth_seen = 0

    def new_node(node_rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(np.mean(y[node_rows])))
        n_samples.append(len(node_rows))
        return len(feature) - 1

    root = new_node(rows)
    stack = [(root, rows, 0)]
    while stack:
        node, node_rows, depth = stack.pop()
        depth_seen = max(depth_seen, depth)
        if depth >= max_depth or len(node_rows) < 2 * params.min_leaf:
            continue
        feats = np.sort(rng.choice(n_features, size=k, replace=False))
        f, t, gain = best_split(X, y, node_rows, feats, params.min_leaf)
        if f < 0 or not gain > 0:
            continue
        mask = X[node_rows, f] <= t
        lrows, rrows = node_rows[mask], node_rows[~mask]
        feature[node], threshold[node] = f, t
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], rrows, depth + 1))
        stack.append((left[node], lrows, depth + 1))
    return Tree(np.array(feature, np.int64), np.array(threshold), np.array(left, np.int64),
                np.array(right, np.int64), np.array(value), np.array(n_samples, np.int64),
                depth_seen)


def canonical_row_order(X, y):
    """Content-determined row order so training ignores the caller's row order."""
    cols = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(cols)


def fit_random_forest(X, y, params=None, n_trees=DEFAULT_N_TREES, seed=0, threads=1):
    params = (params or ForestParams()).validate()
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, p = X.shape
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if params.min_leaf >= n:
        raise ValueError("min_leaf must be smaller than the number of rows")
    canon = canonical_row_order(X, y)
    Xc, yc = X[canon], y[canon]
    m = max(1, math.ceil(params.sample_ratio * n))
    seqs = np.random.SeedSequence(seed).spawn(n_trees)
    seeds = [int(s.generate_state(1)[0]) for s in seqs]

    def one(t):
        rng = np.random.default_rng(seqs[t])
        sub = np.sort(rng.choice(n, size=m, replace=False))
        return _grow_tree(Xc, yc, sub, params, rng, p), sub

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, range(n_trees)))
    else:
        results = [one(t) for t in range(n_trees)]
    in_bag = np.zeros((n_trees, n), dtype=bool)
    for t, (_, sub) in enumerate(results):
        in_bag[t, canon[sub]] = True
    trees = [tr for tr, _ in results]
    counts = np.zeros(p, dtype=np.int64)
    for tr in trees:
        f = tr.feature[tr.feature >= 0]
        np.add.at(counts, f, 1)
    model = RandomForestModel(trees, params, seeds, in_bag, n_features=p, split_counts=counts)
    try:
        model.oob_error = oob_error(model, X, y)
    except ValueError:
        model.oob_error = float("nan")
    return model


def oob_predictions(model, X):
    """Per-row mean over trees that did not see the row; NaN where none."""
    P = model.tree_predictions(X)
    out_bag = ~model.in_bag
    if out_bag.shape[1] != len(X):
        raise ValueError("X must be the training matrix of this forest")
    cnt = out_bag.sum(axis=0)
    pred = np.full(len(X), np.nan)
    ok = cnt > 0
    if ok.any():
        P_masked = np.where(out_bag, P, np.inf)
        P_sorted = np.sort(P_masked, axis=0)
        for i in np.nonzero(ok)[0]:
            pred[i] = math.fsum(P_sorted[:cnt[i], i]) / cnt[i]
    return pred, cnt


def oob_error(model, X, y):
    """Mean squared OOB error; rows seen by every tree are skipped and counted."""
    pred, cnt = oob_predictions(model, X)
    ok = cnt > 0
    model.oob_skipped = int((~ok).sum())
    if not ok.any():
        raise ValueError("no OOB rows")
    d = pred[ok] - np.asarray(y, dtype=np.float64)[ok]
    return float(np.mean(d * d))


def tree_oob_errors(model, X, y):
    """OOB mean squared error of each tree on its own left-out rows."""
    y = np.asarray(y, dtype=np.float64)
    out = []
    for t, tree in enumerate(model.trees):
        mask = ~model.in_bag[t]
        if not mask.any():
            out.append(float("nan"))
            continue
        d = tree.predict(X[mask]) - y[mask]
        out.append(float(np.mean(d * d)))
    return np.array(out)


def grid_search_oob(X, y, grids=None, n_trees=DEFAULT_N_TREES, seed=0, threads=1):
    """Exhaustive OOB search; ties keep the first cell in grid order."""
    grids = grids or OOB_GRID
    names = ("feature_ratio", "sample_ratio", "max_depth", "min_leaf")
    values = [list(grids.get(k, [getattr(ForestParams(), k)])) for k in names]
    if any(len(v) == 0 for v in values):
        raise ValueError("empty grid")
    table = []
    best, best_err = None, math.inf
    for cell in itertools.product(*values):
        params = ForestParams(**dict(zip(names, cell)))
        if params.min_leaf >= len(X):
            err = float("nan")
        else:
            model = fit_random_forest(X, y, params, n_trees, seed, threads)
            err = model.oob_error
        table.append({**dict(zip(names, cell)), "oob_error": err})
        if np.isfinite(err) and err < best_err:
            best, best_err = params, err
    if best is None:
        raise ValueError("no grid cell produced an OOB error")
    return best, table
