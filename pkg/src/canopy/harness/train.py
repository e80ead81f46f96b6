"""Mini-batch training of the deep regressors with validation-R^2 model selection."""
import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .. import io
from ..core import AugmentConfig, augment, normalize_cloud, sample_rng
from ..models import CONFIG_CLASSES, MODEL_KINDS, build_model, config_from_text, config_to_text, forward_clouds
from ..nn import functional as F
from ..nn.autograd import no_grad
from ..nn.optim import AdamW, cosine_warm_restart_lr
from .evaluate import metrics

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_r2")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 310
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 0.01
    t0: int = 10
    t_mult: int = 2
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_batch_size: int = 64

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        return self


@dataclass
class TrainResult:
    model: object
    kind: str
    history: list           # rows as HISTORY_COLUMNS
    best_epoch: int         # -1 when no epoch ran
    best_val_r2: float
    target_mean: np.ndarray
    target_std: np.ndarray


def _targets(records):
    return np.array([[r.targets.agb, r.targets.volume] for r in records], dtype=np.float64)


def target_scaling(records):
    Y = _targets(records)
    mean = Y.mean(axis=0)
    std = Y.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def _sample_key(rec):
    return f"{rec.plot_id}|{rec.cloud_path}"


def predict_clouds(model, clouds, target_mean, target_std, batch_size=64):
    """De-standardised (n, 2) predictions in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for s in range(0, len(clouds), batch_size):
            out.append(forward_clouds(model, clouds[s:s + batch_size]).data)
    model.train(was_training)
    if not out:
        return np.empty((0, 2))
    return np.concatenate(out) * target_std + target_mean


def mean_r2(Y, P):
    vals = [metrics(Y[:, j], P[:, j])["r2"] for j in range(Y.shape[1])]
    return float(np.mean(vals))


def train(kind, train_records, val_records, load_cloud, config=None, model_config=None, seed=0,
          log=None):
    """Fit a ``kind`` model; returns the best-validation-R^2 weights.

    ``load_cloud(record)`` gives the raw cloud; clouds are normalised once and
    augmented per (seed, sample, epoch) on the training split only.
    """
    cfg = (config or TrainConfig()).validate()
    if not train_records:
        raise ValueError("empty training split")
    if not val_records:
        raise ValueError("empty validation split")
    model = build_model(kind, model_config, seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    y_mean, y_std = target_scaling(train_records)
    train_clouds = [normalize_cloud(load_cloud(r)) for r in train_records]
    val_clouds = [normalize_cloud(load_cloud(r)) for r in val_records]
    Y_train = (_targets(train_records) - y_mean) / y_std
    Y_val = _targets(val_records)

    best_state, best_r2, best_epoch = model.state_dict(), -math.inf, -1
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_warm_restart_lr(epoch, cfg.lr, cfg.lr_min, cfg.t0, cfg.t_mult)
        order = np.random.default_rng([seed, epoch]).permutation(len(train_records))
        model.train()
        loss_sum = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            batch = [augment(train_clouds[i], sample_rng(seed, _sample_key(train_records[i]), epoch),
                             cfg.augment) for i in idx]
            loss = F.smooth_l1(forward_clouds(model, batch), Y_train[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, value)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            loss_sum += value * len(idx)
        train_loss = loss_sum / len(order)
        P = predict_clouds(model, val_clouds, y_mean, y_std, cfg.eval_batch_size)
        val_loss = float(F.smooth_l1(P / y_std, Y_val / y_std).data)
        val_r2 = mean_r2(Y_val, P)
        history.append((epoch, lr, train_loss, val_loss, val_r2))
        if log is not None:
            log(f"epoch {epoch:3d} lr {lr:.2e} train {train_loss:.4f} val {val_loss:.4f} r2 {val_r2:.4f}")
        if val_r2 > best_r2:
            best_r2, best_epoch, best_state = val_r2, epoch, model.state_dict()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, kind, history, best_epoch,
                       best_r2 if best_epoch >= 0 else float("nan"), y_mean, y_std)


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# checkpoints -------------------------------------------------------------------

def checkpoint_sections(result):
    model = result.model
    return {
        "meta": {"kind": io.text_array(result.kind),
                 "config": io.text_array(config_to_text(model.config)),
                 "target_mean": result.target_mean, "target_std": result.target_std,
                 "best_epoch": np.array([result.best_epoch])},
        "checkpoint": model.state_dict(),
    }


def save_checkpoint(path, result):
    io.save(path, checkpoint_sections(result))


def checkpoint_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_checkpoint(path):
    """(model, kind, target_mean, target_std) from a container written by save_checkpoint."""
    sec = io.load(path)
    meta = sec["meta"]
    kind = io.array_text(meta["kind"])
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r} in checkpoint")
    cfg = config_from_text(io.array_text(meta["config"]), CONFIG_CLASSES)
    model = build_model(kind, cfg, 0)
    model.load_state_dict(sec["checkpoint"])
    model.eval()
    return model, kind, meta["target_mean"], meta["target_std"]
