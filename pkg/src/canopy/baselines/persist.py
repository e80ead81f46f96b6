"""Fitted feature baselines in the CNPY container, one model per target."""
import json

import numpy as np

from .. import io
from .forest import ForestParams, RandomForestModel, Tree
from .linear import LinearModel
from .power import PowerModel

BASELINE_KINDS = ("linear", "power", "rf")
_TREE_FIELDS = ("feature", "threshold", "left", "right", "value", "n_samples")


def _encode(model):
    if isinstance(model, LinearModel):
        return {"weights": model.weights, "bias": np.array([model.bias])}
    if isinstance(model, PowerModel):
        return {"w": model.w, "n_iter": np.array([model.n_iter])}
    if isinstance(model, RandomForestModel):
        out = {"params": io.text_array(json.dumps(model.params.__dict__, sort_keys=True)),
               "seeds": np.array(model.seeds, dtype=np.int64),
               "in_bag": model.in_bag.astype(np.int64),
               "oob_error": np.array([model.oob_error]),
               "n_features": np.array([model.n_features])}
        for i, t in enumerate(model.trees):
            for f in _TREE_FIELDS:
                out[f"tree{i}.{f}"] = getattr(t, f)
            out[f"tree{i}.depth"] = np.array([t.depth])
        return out
    raise TypeError(f"cannot persist {type(model).__name__}")


def _decode(kind, arrays):
    if kind == "linear":
        return LinearModel(arrays["weights"], float(arrays["bias"][0]))
    if kind == "power":
        return PowerModel(arrays["w"], [], int(arrays["n_iter"][0]))
    if kind == "rf":
        params = ForestParams(**json.loads(io.array_text(arrays["params"])))
        n = len(arrays["seeds"])
        trees = [Tree(*(arrays[f"tree{i}.{f}"] for f in _TREE_FIELDS), int(arrays[f"tree{i}.depth"][0]))
                 for i in range(n)]
        return RandomForestModel(trees, params, arrays["seeds"].tolist(), arrays["in_bag"].astype(bool),
                                 float(arrays["oob_error"][0]), 0, int(arrays["n_features"][0]))
    raise ValueError(f"unknown baseline kind {kind!r}")


def save_baseline(path, kind, models):
    """``models`` maps target name -> fitted model of ``kind``."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    sections = {"meta": {"kind": io.text_array(kind), "targets": io.text_array(",".join(models))}}
    for target, m in models.items():
        sections[target] = _encode(m)
    io.save(path, sections)


def load_baseline(path):
    """(kind, {target: model}) from :func:`save_baseline` output."""
    sec = io.load(path)
    kind = io.array_text(sec["meta"]["kind"])
    targets = io.array_text(sec["meta"]["targets"]).split(",")
    return kind, {t: _decode(kind, sec[t]) for t in targets}
