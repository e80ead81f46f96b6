"""Multiplicative power model y = w1 * zmean^w2 * z95^w3 * ir^w4.

Fit in two stages: OLS in log space over strictly positive rows gives the
start point, then Levenberg-Marquardt minimises the squared residuals on the
original scale over all rows (zero targets included).
"""
from dataclasses import dataclass, field

import numpy as np

from ..features import IDX_AG_MEAN, IDX_AG_P95, IDX_IR, N_FEATURES

LM_LAMBDA0 = 1e-3
LM_FACTOR = 10.0
LM_RTOL = 1e-10
LM_MAX_ITER = 200
LM_LAMBDA_MAX = 1e16
MIN_POSITIVE = 10


@dataclass
class PowerModel:
    w: np.ndarray
    history: list = field(default_factory=list, repr=False)  # objective after each accepted step
    n_iter: int = 0

    def predict(self, Z):
        return predict_power(self, Z)


def _design(Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.shape[1] == N_FEATURES:
        Z = Z[:, [IDX_AG_MEAN, IDX_AG_P95, IDX_IR]]
    if Z.shape[1] != 3:
        raise ValueError("expected 3 power-model inputs or a full feature matrix")
    return Z


def _pow(base, e):
    """base**e with 0**e = 0 for e > 0, 0**0 = 1, 0**e = inf for e < 0."""
    pos = base > 0
    out = np.where(pos, np.power(np.where(pos, base, 1.0), e), 0.0)
    if e == 0:
        out = np.where(pos, out, 1.0)
    elif e < 0:
        out = np.where(pos, out, np.inf)
    return out


def _model(w, Z):
    return w[0] * _pow(Z[:, 0], w[1]) * _pow(Z[:, 1], w[2]) * _pow(Z[:, 2], w[3])


def predict_power(model, Z):
    Z = _design(Z)
    if np.any(Z < 0):
        raise ValueError("power-model inputs must be non-negative")
    w = model.w if isinstance(model, PowerModel) else np.asarray(model, dtype=np.float64)
    out = _model(w, Z)
    return out


def _jacobian(w, Z, pred):
    logs = np.where(Z > 0, np.log(np.where(Z > 0, Z, 1.0)), 0.0)
    J = np.empty((len(Z), 4))
    J[:, 0] = pred / w[0] if w[0] != 0 else _model(np.r_[1.0, w[1:]], Z)
    J[:, 1:] = pred[:, None] * logs
    return J


def _log_init(Z, y, free):
    pos = (y > 0) & np.all(Z > 0, axis=1)
    if pos.sum() < MIN_POSITIVE:
        raise ValueError(f"need at least {MIN_POSITIVE} strictly positive samples, got {int(pos.sum())}")
    A = np.column_stack([np.ones(pos.sum()), np.log(Z[pos])])[:, free]
    coef, *_ = np.linalg.lstsq(A, np.log(y[pos]), rcond=None)
    w = np.zeros(4)
    w[free] = coef
    w[0] = np.exp(w[0])
    return w


def fit_power(Z, y, free=(True, True, True, True)):
    """Least-squares power model.  ``free`` pins exponents at 0 when False."""
    Z = _design(Z)
    y = np.asarray(y, dtype=np.float64)
    free = np.asarray(free, dtype=bool)
    if not free[0]:
        raise ValueError("the scale w1 must be free")
    w = _log_init(Z, y, free)

    def objective(wv):
        r = y - _model(wv, Z)
        return float(r @ r)

    f = objective(w)
    if not np.isfinite(f):
        raise FloatingPointError("diverged")
    lam = LM_LAMBDA0
    history = [f]
    it = 0
    for it in range(1, LM_MAX_ITER + 1):
        pred = _model(w, Z)
        r = y - pred
        J = _jacobian(w, Z, pred)[:, free]
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1e-12 * max(diag.max(), 1.0)
        accepted = False
        while lam <= LM_LAMBDA_MAX:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= LM_FACTOR
                continue
            w_new = w.copy()
            w_new[free] += step
            f_new = objective(w_new) if w_new[0] > 0 else np.inf
            if np.isfinite(f_new) and f_new < f:
                accepted = True
                break
            lam *= LM_FACTOR
        if not accepted:
            break
        if not np.all(np.isfinite(w_new)):
            raise FloatingPointError("diverged")
        decrease = (f - f_new) / f if f > 0 else 0.0
        w, f = w_new, f_new
        history.append(f)
        lam = max(lam / LM_FACTOR, 1e-300)
        if decrease < LM_RTOL or f == 0.0:
            break
    return PowerModel(w, history, it)
