"""Height-distribution statistics of first returns, for the classical baselines.

Moments use population formulas (divide by n).  Skewness is m3 / m2^1.5 and
kurtosis m4 / m2^2 (not excess); both are 0 for zero-variance sets.
Percentiles interpolate linearly between order statistics at h = (n-1) q.
"""
import csv

import numpy as np

PERCENTILES = (5, 10, 25, 50, 75, 90, 95, 99)
STAT_NAMES = ("mean_z", "std_z", "cv_z", "skew_z", "kurt_z") + tuple(f"p{q:02d}" for q in PERCENTILES)
FEATURE_NAMES = tuple(f"all_{s}" for s in STAT_NAMES) + tuple(f"ag_{s}" for s in STAT_NAMES) + ("ir",)
N_FEATURES = len(FEATURE_NAMES)  # 27
AG_HEIGHT = 1.0
CV_GUARD = 1e-9

IDX_AG_MEAN = FEATURE_NAMES.index("ag_mean_z")
IDX_AG_P95 = FEATURE_NAMES.index("ag_p95")
IDX_IR = FEATURE_NAMES.index("ir")


def percentile_linear(sorted_z, q):
    n = len(sorted_z)
    h = (n - 1) * q / 100.0
    lo = int(np.floor(h))
    hi = min(lo + 1, n - 1)
    return sorted_z[lo] + (h - lo) * (sorted_z[hi] - sorted_z[lo])


def height_stats(z):
    """The 13 statistics of one height sample; zeros for an empty sample."""
    z = np.sort(np.asarray(z, dtype=np.float64))
    if len(z) == 0:
        return np.zeros(len(STAT_NAMES))
    if z[0] == z[-1]:
        # exactly constant: avoid rounding noise in the mean feeding skew/kurt
        mean, d, m2 = z[0], np.zeros_like(z), 0.0
    else:
        mean = z.mean()
        d = z - mean
        m2 = np.mean(d * d)
    std = np.sqrt(m2)
    if std > 0:
        # standardise first so tiny spreads do not underflow m2**2
        u = d / std
        skew = np.mean(u ** 3)
        kurt = np.mean(u ** 4)
    else:
        skew = kurt = 0.0
    cv = std / mean if abs(mean) >= CV_GUARD else 0.0
    pct = [percentile_linear(z, q) for q in PERCENTILES]
    return np.array([mean, std, cv, skew, kurt] + pct)


def extract_features(cloud, return_meta=False):
    """27 features over first returns: 13 on all, 13 on z > 1 m, and the interception ratio."""
    first = cloud.xyz[cloud.return_index == 1, 2]
    if len(first) == 0:
        raise ValueError("no first returns")
    ag = first[first > AG_HEIGHT]
    vec = np.concatenate([height_stats(first), height_stats(ag), [len(ag) / len(first)]])
    if return_meta:
        return vec, {"ag_empty": len(ag) == 0, "n_first": len(first), "n_ag": len(ag)}
    return vec


def feature_matrix(records, load_cloud):
    """Stack features for ``records`` (row order kept) plus the (n, 2) target matrix."""
    rows, targets = [], []
    for rec in records:
        try:
            rows.append(extract_features(load_cloud(rec)))
        except ValueError as exc:
            raise ValueError(f"plot {rec.plot_id}: {exc}") from exc
        targets.append([rec.targets.agb, rec.targets.volume])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), N_FEATURES)
    Y = np.array(targets, dtype=np.float64).reshape(len(targets), 2)
    return X, Y


def write_feature_csv(path, records, X, Y):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("plot_id",) + FEATURE_NAMES + ("agb", "volume"))
        for rec, x, y in zip(records, X, Y):
            w.writerow([rec.plot_id] + [repr(float(v)) for v in x] + [repr(float(v)) for v in y])
