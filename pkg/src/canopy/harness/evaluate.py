"""Regression metrics, conifer-share breakdown, residual tables and model comparison."""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

TARGETS = ("agb", "volume")
CONIFER_BINS = ("0", "(0,33]", "(33,66]", "(66,100)", "100")
COMPARE_COLUMNS = ("target", "model", "r2", "rmse", "mape")
RESIDUAL_COLUMNS = ("plot_id", "target", "prediction", "observed", "residual", "conifer_fraction")


def conifer_bin(fraction):
    """Bin label of a conifer share in percent; 0 and 100 are singleton bins."""
    f = float(fraction)
    if not 0.0 <= f <= 100.0:
        raise ValueError(f"conifer fraction {f} outside [0, 100]")
    if f == 0.0:
        return "0"
    if f <= 33.0:
        return "(0,33]"
    if f <= 66.0:
        return "(33,66]"
    if f < 100.0:
        return "(66,100)"
    return "100"


def metrics(y, pred):
    """RMSE, R^2 and MAPE (percent, positive targets only) of one target."""
    y = np.asarray(y, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if y.shape != pred.shape or y.ndim != 1:
        raise ValueError("y and pred must be equal-length vectors")
    n = len(y)
    if n == 0:
        raise ValueError("empty split")
    d = pred - y
    rmse = math.sqrt(math.fsum(d * d) / n)
    ss_tot = math.fsum((y - math.fsum(y) / n) ** 2)
    r2_defined = ss_tot > 0.0
    r2 = 1.0 - math.fsum(d * d) / ss_tot if r2_defined else float("nan")
    pos = y > 0
    n_pos = int(pos.sum())
    mape = math.fsum(np.abs(d[pos]) / y[pos] * 100.0) / n_pos if n_pos else float("nan")
    return {"rmse": rmse, "r2": r2, "r2_defined": bool(r2_defined), "mape": mape,
            "n": n, "excluded_n": n - n_pos}


@dataclass
class EvalReport:
    model: str
    split: str
    targets: dict                   # target -> metrics dict
    by_conifer_bin: dict            # bin -> target -> metrics dict
    residuals: list = field(default_factory=list)  # rows as RESIDUAL_COLUMNS

    def to_json(self):
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v
        return json.dumps({"model": self.model, "split": self.split, "targets": clean(self.targets),
                           "by_conifer_bin": clean(self.by_conifer_bin)}, indent=2, sort_keys=True)


def evaluate_predictions(records, pred, model="model", split="test"):
    """Report for ``pred`` (n, 2) against the records' targets, in record order."""
    if not records:
        raise ValueError("split is empty")
    pred = np.asarray(pred, dtype=np.float64).reshape(len(records), 2)
    Y = np.array([[r.targets.agb, r.targets.volume] for r in records])
    bins = [conifer_bin(r.conifer_fraction) for r in records]
    targets = {t: metrics(Y[:, j], pred[:, j]) for j, t in enumerate(TARGETS)}
    by_bin = {}
    for b in CONIFER_BINS:
        rows = np.array([x == b for x in bins])
        if rows.any():
            by_bin[b] = {t: metrics(Y[rows, j], pred[rows, j]) for j, t in enumerate(TARGETS)}
    residuals = []
    for j, t in enumerate(TARGETS):
        for r, p, y in zip(records, pred[:, j], Y[:, j]):
            residuals.append((r.plot_id, t, float(p), float(y), float(p - y), float(r.conifer_fraction)))
    return EvalReport(model, split, targets, by_bin, residuals)


def write_residuals(path, report):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESIDUAL_COLUMNS)
        for row in report.residuals:
            w.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])


def read_residuals(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        if tuple(next(rd)) != RESIDUAL_COLUMNS:
            raise ValueError(f"{path}: unexpected residual header")
        return [(r[0], r[1], float(r[2]), float(r[3]), float(r[4]), float(r[5])) for r in rd]


def metrics_from_residuals(rows):
    """Recompute the per-target metrics from a residual table."""
    out = {}
    for t in TARGETS:
        sel = [r for r in rows if r[1] == t]
        if sel:
            out[t] = metrics([r[3] for r in sel], [r[2] for r in sel])
    return out


def write_report(out_dir, report):
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    write_residuals(out_dir / "residuals.csv", report)


def compare_models(reports, path=None):
    """Rows (target, model, r2, rmse, mape), best R^2 first within each target."""
    if not reports:
        raise ValueError("no reports to compare")
    rows = []
    for t in TARGETS:
        block = [(t, rep.model, rep.targets[t]["r2"], rep.targets[t]["rmse"], rep.targets[t]["mape"])
                 for rep in reports if t in rep.targets]
        block.sort(key=lambda r: -r[2] if not math.isnan(r[2]) else math.inf)
        rows.extend(block)
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(COMPARE_COLUMNS)
            for r in rows:
                w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:]])
    return rows


def load_report(path):
    d = json.loads(open(path, encoding="utf-8").read())

    def nanify(v):
        if v is None:
            return float("nan")
        if isinstance(v, dict):
            return {k: nanify(x) for k, x in v.items()}
        return v
    return EvalReport(d["model"], d["split"], nanify(d["targets"]), nanify(d["by_conifer_bin"]))
