"""Synthetic forest plots with known biomass and volume.

Each tree is a vertical stem under an ellipsoidal crown.  Laser pulses fall
uniformly on the plot disc; a pulse under one or more crowns produces canopy
returns (highest first) and possibly a ground return.  Plot targets are sums
of per-tree allometric values scaled to one hectare, computed from the tree
geometry at field-measurement time, while the cloud shows the trees at scan
time (they keep growing during the time gap).
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import PlotRecord, PointCloud, RegressionTargets, write_cloud, write_manifest


@dataclass
class Allometry:
    """agb_kg = a * H**b * CW**2, volume_m3 = c * H**d * CW**2 (H, CW in meters)."""
    a: float
    b: float
    c: float
    d: float

    def agb_kg(self, height, crown_width):
        return self.a * np.power(height, self.b) * crown_width ** 2

    def volume_m3(self, height, crown_width):
        return self.c * np.power(height, self.d) * crown_width ** 2


@dataclass
class SyntheticConfig:
    radius_m: float = 15.0
    points_per_m2: float = 4.5          # laser pulses (first returns) per square meter
    trees_per_plot: tuple = (3.0, 30.0)  # Poisson mean drawn uniformly from this range
    zero_tree_prob: float = 0.03
    stand_height_m: tuple = (6.0, 28.0)
    height_spread: float = 0.15         # lognormal sigma around the stand height
    crown_ratio: dict = field(default_factory=lambda: {"conifer": 0.18, "broadleaf": 0.30})
    crown_length: dict = field(default_factory=lambda: {"conifer": 0.6, "broadleaf": 0.5})
    crown_spread: float = 0.15
    stand_crown_spread: float = 0.0     # lognormal sigma of a per-stand crown-width factor
    hit_prob: dict = field(default_factory=lambda: {"conifer": 0.75, "broadleaf": 0.85})
    second_hit_prob: dict = field(default_factory=lambda: {"conifer": 0.35, "broadleaf": 0.35})
    ground_after_canopy_prob: float = 0.4
    max_returns: int = 4
    ground_noise_m: float = 0.03
    stem_points_per_tree: float = 2.0
    pure_stand_prob: float = 0.5        # half the plots are single-species
    understory_prob: float = 0.0        # share of plots with a suppressed lower layer
    understory_trees: tuple = (0.0, 60.0)
    understory_height: tuple = (0.3, 0.55)  # fraction of the stand height
    allometry: dict = field(default_factory=lambda: {
        "conifer": Allometry(a=0.12, b=1.6, c=0.00015, d=1.7),
        "broadleaf": Allometry(a=0.18, b=1.5, c=0.0002, d=1.6),
    })
    growth_per_year: float = 0.02       # relative height growth
    near_gap_prob: float = 0.5          # share of |time gap| <= 1 year
    max_gap_years: float = 9.0
    revisit_prob: float = 0.1
    flag_probs: tuple = (0.02, 0.02, 0.02, 0.01)

    def validate(self):
        if self.radius_m <= 0 or self.points_per_m2 <= 0:
            raise ValueError("radius and pulse density must be positive")
        if self.max_returns < 1:
            raise ValueError("max_returns must be >= 1")
        return self


@dataclass
class Tree:
    x: float
    y: float
    height: float
    crown_width: float
    crown_length: float
    conifer: bool


def plot_area_ha(cfg):
    return np.pi * cfg.radius_m ** 2 / 1e4


def tree_values(tree, cfg):
    """(agb_kg, volume_m3) of one tree."""
    allo = cfg.allometry["conifer" if tree.conifer else "broadleaf"]
    return float(allo.agb_kg(tree.height, tree.crown_width)), float(allo.volume_m3(tree.height, tree.crown_width))


def plot_targets(trees, cfg):
    """Per-hectare AGB (t/ha) and volume (m^3/ha), plus the conifer share of AGB in percent."""
    area = plot_area_ha(cfg)
    agb = vol = agb_con = 0.0
    for t in trees:
        a, v = tree_values(t, cfg)
        agb += a
        vol += v
        agb_con += a if t.conifer else 0.0
    conifer_pct = 100.0 * agb_con / agb if agb > 0 else 0.0
    return RegressionTargets(agb / 1000.0 / area, vol / area), conifer_pct


def grown(trees, factor):
    return [Tree(t.x, t.y, t.height * factor, t.crown_width * factor, t.crown_length * factor, t.conifer)
            for t in trees]


def sample_trees(cfg, rng, n_trees=None):
    """Trees standing on the plot at field-measurement time."""
    if n_trees is None:
        if rng.uniform() < cfg.zero_tree_prob:
            return []
        n_trees = int(rng.poisson(rng.uniform(*cfg.trees_per_plot)))
    if rng.uniform() < cfg.pure_stand_prob:
        share = float(rng.integers(2))
    else:
        share = rng.uniform()
    stand_h = rng.uniform(*cfg.stand_height_m)
    stand_cw = np.exp(rng.normal(0.0, cfg.stand_crown_spread)) if cfg.stand_crown_spread > 0 else 1.0
    trees = []
    for _ in range(n_trees):
        r = cfg.radius_m * np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * np.pi)
        conifer = bool(rng.uniform() < share)
        kind = "conifer" if conifer else "broadleaf"
        h = stand_h * np.exp(rng.normal(0.0, cfg.height_spread))
        cw = stand_cw * cfg.crown_ratio[kind] * h * np.exp(rng.normal(0.0, cfg.crown_spread))
        trees.append(Tree(r * np.cos(phi), r * np.sin(phi), h, cw, cfg.crown_length[kind] * h, conifer))
    if n_trees and rng.uniform() < cfg.understory_prob:
        for _ in range(int(rng.poisson(rng.uniform(*cfg.understory_trees)))):
            r = cfg.radius_m * np.sqrt(rng.uniform())
            phi = rng.uniform(0.0, 2.0 * np.pi)
            h = stand_h * rng.uniform(*cfg.understory_height)
            cw = cfg.crown_ratio["broadleaf"] * h * np.exp(rng.normal(0.0, cfg.crown_spread))
            trees.append(Tree(r * np.cos(phi), r * np.sin(phi), h, cw,
                              cfg.crown_length["broadleaf"] * h, False))
    return trees


def scan(trees, cfg, rng, origin=(0.0, 0.0)):
    """Simulated returns of one plot; heights are above ground."""
    n_pulses = int(rng.poisson(cfg.points_per_m2 * np.pi * cfg.radius_m ** 2))
    r = cfg.radius_m * np.sqrt(rng.uniform(size=n_pulses))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n_pulses)
    px, py = r * np.cos(phi), r * np.sin(phi)

    hit_pulse, hit_z = [], []
    for t in trees:
        a = t.crown_width / 2.0
        b = t.crown_length / 2.0
        zc = t.height - b
        rr = ((px - t.x) ** 2 + (py - t.y) ** 2) / (a * a)
        idx = np.nonzero(rr < 1.0)[0]
        if len(idx) == 0:
            continue
        half = b * np.sqrt(1.0 - rr[idx])     # crown half-thickness at the pulse
        kind = "conifer" if t.conifer else "broadleaf"
        p_hit = cfg.hit_prob[kind]
        hit = rng.uniform(size=len(idx)) < p_hit
        depth = np.minimum(rng.exponential(0.25 * b, size=len(idx)), 2.0 * half)
        hit_pulse.append(idx[hit])
        hit_z.append((zc + half - depth)[hit])
        second = hit & (rng.uniform(size=len(idx)) < cfg.second_hit_prob[kind])
        depth2 = depth + rng.uniform(size=len(idx)) * (2.0 * half - depth)
        hit_pulse.append(idx[second])
        hit_z.append((zc + half - depth2)[second])

    pulse = np.concatenate(hit_pulse) if hit_pulse else np.empty(0, np.int64)
    z = np.concatenate(hit_z) if hit_z else np.empty(0)
    has_canopy = np.zeros(n_pulses, dtype=bool)
    has_canopy[pulse] = True
    ground = ~has_canopy | (rng.uniform(size=n_pulses) < cfg.ground_after_canopy_prob)
    g_idx = np.nonzero(ground)[0]
    pulse = np.concatenate([pulse, g_idx])
    z = np.concatenate([z, np.abs(rng.normal(0.0, cfg.ground_noise_m, size=len(g_idx)))])

    # number the returns of each pulse from the top down and drop the excess
    order = np.lexsort((-z, pulse))
    pulse, z = pulse[order], z[order]
    starts = np.r_[0, np.nonzero(np.diff(pulse))[0] + 1]
    sizes = np.diff(np.r_[starts, len(pulse)])
    rank = np.arange(len(pulse)) - np.repeat(starts, sizes)
    keep = rank < cfg.max_returns
    count = np.minimum(np.repeat(sizes, sizes), cfg.max_returns)
    pulse, z, rank, count = pulse[keep], z[keep], rank[keep], count[keep]
    xyz = np.column_stack([px[pulse], py[pulse], np.maximum(z, 0.0)])
    ret_idx, ret_cnt = rank + 1, count

    # trunk points below each crown, as single-return pulses
    stems = []
    for t in trees:
        m = int(rng.poisson(cfg.stem_points_per_tree))
        base = t.height - t.crown_length
        if m == 0 or base <= 0:
            continue
        ang = rng.uniform(0.0, 2.0 * np.pi, size=m)
        rad = t.height / 160.0
        sx, sy = t.x + rad * np.cos(ang), t.y + rad * np.sin(ang)
        keep_s = sx ** 2 + sy ** 2 <= cfg.radius_m ** 2
        stems.append(np.column_stack([sx, sy, rng.uniform(0.0, base, size=m)])[keep_s])
    if stems:
        s = np.concatenate(stems)
        xyz = np.vstack([xyz, s])
        ret_idx = np.r_[ret_idx, np.ones(len(s), np.int64)]
        ret_cnt = np.r_[ret_cnt, np.ones(len(s), np.int64)]
    xyz[:, 0] += origin[0]
    xyz[:, 1] += origin[1]
    return PointCloud(xyz, ret_idx, ret_cnt)


def draw_time_gap(cfg, rng):
    if rng.uniform() < cfg.near_gap_prob:
        return float(rng.uniform(-1.0, 1.0))
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(1.0, cfg.max_gap_years))


def _add_structure(cloud, cfg, rng, origin):
    """A flat-roofed box (no biomass) somewhere on the plot."""
    side = rng.uniform(4.0, 8.0)
    cx, cy = rng.uniform(-cfg.radius_m / 2, cfg.radius_m / 2, size=2)
    m = int(cfg.points_per_m2 * side * side)
    roof = np.column_stack([cx + rng.uniform(-side / 2, side / 2, m) + origin[0],
                            cy + rng.uniform(-side / 2, side / 2, m) + origin[1],
                            np.full(m, rng.uniform(3.0, 8.0))])
    return PointCloud(np.vstack([cloud.xyz, roof]), np.r_[cloud.return_index, np.ones(m, np.int64)],
                      np.r_[cloud.return_count, np.ones(m, np.int64)])


def _flagged(cfg, rng):
    return tuple(bool(rng.uniform() < p) for p in cfg.flag_probs)


def synth_generate(cfg, n_plots, seed, out_dir):
    """Write ``n_plots`` records (clouds under ``clouds/``) and ``manifest.jsonl``.

    Some records revisit an earlier plot: same trees and plot id, another
    scan date.  Returns the list of records.
    """
    cfg = cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    stands = []       # (plot_id, field-time trees, origin)
    records = []
    for i in range(n_plots):
        if stands and rng.uniform() < cfg.revisit_prob:
            plot_id, trees, origin = stands[int(rng.integers(len(stands)))]
        else:
            plot_id = f"P{len(stands):05d}"
            trees = sample_trees(cfg, rng)
            origin = (float(rng.uniform(0, 1000)), float(rng.uniform(0, 1000)))
            stands.append((plot_id, trees, origin))
        gap = draw_time_gap(cfg, rng)
        flags = _flagged(cfg, rng)
        targets, conifer_pct = plot_targets(trees, cfg)
        scanned = grown(trees, max(0.1, 1.0 + cfg.growth_per_year * gap))
        if flags[2]:
            scanned = []                 # harvested between field visit and scan
        if flags[0]:
            scanned = scanned + sample_trees(cfg, rng, n_trees=3)
        cloud = scan(scanned, cfg, rng, origin)
        if flags[1]:
            cloud = _add_structure(cloud, cfg, rng, origin)
        if flags[3]:
            targets = RegressionTargets(targets.agb * 5.0, targets.volume * 5.0)
        path = f"clouds/{plot_id}_{i:05d}.csv"
        write_cloud(out_dir / path, cloud)
        records.append(PlotRecord(plot_id, path, targets, round(conifer_pct, 6), flags, None, gap))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records
