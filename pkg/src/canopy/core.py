"""Point clouds, plot records and dataset preparation."""
import csv
import io
import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

CSV_HEADER = ("x", "y", "z", "return_number", "num_returns")
ERROR_FLAG_NAMES = ("extra_trees", "non_forest_objects", "harvested", "unreasonable")
SPLITS = ("train", "validation", "test")
Z_TOL = 1e-6
MIN_CANOPY_Z = 1.3
DEFAULT_CARBON_FACTOR = 0.5  # convention, not a measured coefficient


class Point(NamedTuple):
    x: float
    y: float
    z: float
    return_index: int
    return_count: int


@dataclass
class PointCloud:
    xyz: np.ndarray
    return_index: np.ndarray
    return_count: np.ndarray
    plot_id: str = ""
    time_gap_years: float = 0.0

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.return_index = np.asarray(self.return_index, dtype=np.int64).reshape(n)
        self.return_count = np.asarray(self.return_count, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.xyz)

    @property
    def points(self):
        return [Point(*map(float, p), int(r), int(c))
                for p, r, c in zip(self.xyz, self.return_index, self.return_count)]

    @classmethod
    def from_points(cls, points, plot_id="", time_gap_years=0.0):
        arr = np.array([tuple(p) for p in points], dtype=np.float64).reshape(-1, 5)
        return cls(arr[:, :3], arr[:, 3], arr[:, 4], plot_id, time_gap_years)

    def subset(self, mask_or_idx):
        return PointCloud(self.xyz[mask_or_idx], self.return_index[mask_or_idx],
                          self.return_count[mask_or_idx], self.plot_id, self.time_gap_years)

    def with_xyz(self, xyz):
        return PointCloud(xyz, self.return_index.copy(), self.return_count.copy(),
                          self.plot_id, self.time_gap_years)

    def validate(self):
        if len(self) == 0:
            raise ValueError("empty point cloud")
        if np.any(self.return_index < 1) or np.any(self.return_index > self.return_count):
            raise ValueError("return_index must satisfy 1 <= return_index <= return_count")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("non-finite coordinates")
        return self

    def point_features(self):
        """Per-point model features: return number, return count, height, time gap."""
        n = len(self)
        return np.column_stack([self.return_index.astype(np.float64),
                                self.return_count.astype(np.float64),
                                self.xyz[:, 2],
                                np.full(n, float(self.time_gap_years))])


@dataclass(frozen=True)
class RegressionTargets:
    agb: float
    volume: float

    def __post_init__(self):
        if not (np.isfinite(self.agb) and np.isfinite(self.volume)):
            raise ValueError("targets must be finite")
        if self.agb < 0 or self.volume < 0:
            raise ValueError("targets must be non-negative")

    def as_array(self):
        return np.array([self.agb, self.volume])


@dataclass(frozen=True)
class PlotRecord:
    plot_id: str
    cloud_path: str
    targets: RegressionTargets
    conifer_fraction: float = 0.0
    error_flags: tuple = (False, False, False, False)
    split: Optional[str] = None
    time_gap_years: float = 0.0

    def to_json(self):
        d = dataclasses.asdict(self)
        d["error_flags"] = [bool(f) for f in self.error_flags]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        d["targets"] = RegressionTargets(**d["targets"])
        d["error_flags"] = tuple(bool(f) for f in d["error_flags"])
        if d.get("split") not in (None,) + SPLITS:
            raise ValueError(f"unknown split {d['split']!r}")
        return cls(**d)


# I/O -------------------------------------------------------------------------

def write_cloud(path, cloud, decimals=6):
    fmt = f"{{:.{decimals}f}}"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        lines = [f"{fmt.format(x)},{fmt.format(y)},{fmt.format(z)},{int(r)},{int(c)}"
                 for (x, y, z), r, c in zip(cloud.xyz.tolist(), cloud.return_index.tolist(),
                                            cloud.return_count.tolist())]
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def read_cloud(path, plot_id="", time_gap_years=0.0):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            header = next(csv.reader([fh.readline()]))
            if tuple(h.strip() for h in header) != CSV_HEADER:
                raise ValueError(f"{path}: bad header {header}")
            body = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read point cloud {path}: {exc}") from exc
    if body.strip():
        data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    else:
        data = np.empty((0, 5))
    z = data[:, 2]
    if np.any(z < -Z_TOL):
        raise ValueError(f"{path}: negative height below tolerance")
    data[:, 2] = np.maximum(z, 0.0)
    return PointCloud(data[:, :3], data[:, 3], data[:, 4], plot_id, time_gap_years)


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [PlotRecord.from_json(line) for line in fh if line.strip()]


def resolve_cloud_path(record, base_dir=None):
    p = Path(record.cloud_path)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p


def load_record_cloud(record, base_dir=None):
    return read_cloud(resolve_cloud_path(record, base_dir), record.plot_id, record.time_gap_years)


# transforms --------------------------------------------------------------------

def normalize_cloud(cloud, radius_m=15.0):
    """Center x, y per cloud and divide by ``radius_m``; z stays in meters."""
    if radius_m <= 0:
        raise ValueError("radius must be positive")
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    xyz = cloud.xyz.copy()
    xyz[:, :2] = (xyz[:, :2] - xyz[:, :2].mean(axis=0)) / radius_m
    return cloud.with_xyz(xyz)


@dataclass
class AugmentConfig:
    rotate: bool = True
    sample_dropout_prob: float = 0.5
    point_dropout_rate: float = 0.2
    jitter_var: float = 0.001
    jitter_clip: float = 0.05
    theta: Optional[float] = None  # fixed angle for tests; None draws uniformly

    @classmethod
    def off(cls):
        return cls(rotate=False, sample_dropout_prob=0.0, point_dropout_rate=0.0, jitter_var=0.0)


def sample_rng(seed, plot_id, epoch):
    """Per-sample generator keyed on (seed, plot_id, epoch)."""
    tag = zlib.crc32(str(plot_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag, int(epoch)]))


def truncated_normal(rng, size, std, clip):
    """Zero-mean normal with scale ``std`` restricted to [-clip, clip] by rejection."""
    out = rng.normal(0.0, std, size=size)
    bad = np.abs(out) > clip
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > clip
    return out


def augment(cloud, rng, cfg=None):
    """Rotate about z through the centroid, drop points, jitter coordinates."""
    cfg = cfg or AugmentConfig()
    xyz = cloud.xyz.copy()
    keep = np.arange(len(cloud))
    if cfg.rotate or cfg.theta is not None:
        theta = cfg.theta if cfg.theta is not None else rng.uniform(0.0, 2.0 * np.pi)
        if theta != 0.0:
            c, s = np.cos(theta), np.sin(theta)
            centre = xyz[:, :2].mean(axis=0)
            d = xyz[:, :2] - centre
            xyz[:, 0] = centre[0] + c * d[:, 0] - s * d[:, 1]
            xyz[:, 1] = centre[1] + s * d[:, 0] + c * d[:, 1]
    if cfg.sample_dropout_prob > 0 and rng.uniform() < cfg.sample_dropout_prob:
        mask = rng.uniform(size=len(xyz)) >= cfg.point_dropout_rate
        if not mask.any():
            mask[rng.integers(len(xyz))] = True
        keep = keep[mask]
        xyz = xyz[mask]
    if cfg.jitter_var > 0:
        xyz = xyz + truncated_normal(rng, xyz.shape, np.sqrt(cfg.jitter_var), cfg.jitter_clip)
    return PointCloud(xyz, cloud.return_index[keep], cloud.return_count[keep],
                      cloud.plot_id, cloud.time_gap_years)


# dataset -----------------------------------------------------------------------

@dataclass
class FilterReport:
    kept: int = 0
    dropped: list = field(default_factory=list)  # (plot_id, reason)

    def counts(self):
        out = {}
        for _, reason in self.dropped:
            out[reason] = out.get(reason, 0) + 1
        return out


def filter_dataset(records, base_dir=None, loader=None):
    """Drop harvested / unreasonable records and clouds with no point above 1.3 m."""
    loader = loader or (lambda r: load_record_cloud(r, base_dir))
    survivors, report = [], FilterReport()
    for rec in records:
        if rec.error_flags[3]:
            report.dropped.append((rec.plot_id, "unreasonable"))
            continue
        if rec.error_flags[2]:
            report.dropped.append((rec.plot_id, "harvested"))
            continue
        try:
            cloud = loader(rec)
        except (OSError, ValueError) as exc:
            raise OSError(f"unreadable cloud {rec.cloud_path}: {exc}") from exc
        if len(cloud) == 0 or not np.any(cloud.xyz[:, 2] > MIN_CANOPY_Z):
            report.dropped.append((rec.plot_id, "no points above 1.3 m"))
            continue
        survivors.append(rec)
    report.kept = len(survivors)
    return survivors, report


def assign_splits(records, seed, val_fraction=0.15, test_fraction=0.15, max_eval_gap=1.0):
    """Group-wise split: all records of one plot land in the same split.

    Plots whose every record has |time gap| <= ``max_eval_gap`` may go to
    validation or test; the rest always train.  Fractions are of the plot count.
    """
    groups = {}
    for rec in records:
        groups.setdefault(rec.plot_id, []).append(rec)
    plot_ids = sorted(groups)
    eligible = [p for p in plot_ids
                if all(abs(r.time_gap_years) <= max_eval_gap for r in groups[p])]
    if not eligible:
        raise ValueError("no plots eligible for validation/test")
    rng = np.random.default_rng(seed)
    order = [eligible[i] for i in rng.permutation(len(eligible))]
    n_val = min(int(round(val_fraction * len(plot_ids))), len(order))
    n_test = min(int(round(test_fraction * len(plot_ids))), len(order) - n_val)
    split_of = {p: "train" for p in plot_ids}
    split_of.update({p: "validation" for p in order[:n_val]})
    split_of.update({p: "test" for p in order[n_val:n_val + n_test]})
    return [dataclasses.replace(r, split=split_of[r.plot_id]) for r in records]


def carbon_from_biomass(agb, factor=DEFAULT_CARBON_FACTOR):
    if not 0 < factor <= 1:
        raise ValueError("carbon factor must be in (0, 1]")
    agb = np.asarray(agb, dtype=np.float64)
    if np.any(agb < 0):
        raise ValueError("biomass must be non-negative")
    out = factor * agb
    return float(out) if out.ndim == 0 else out
