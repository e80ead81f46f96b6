from dataclasses import dataclass

import numpy as np

RIDGE_JITTER = 1e-8


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float

    def predict(self, X):
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias


def fit_linear(X, y):
    """Ordinary least squares through the normal equations.

    Columns are centred and scaled to unit norm, the Gram matrix gets a
    1e-8 diagonal jitter, and one step of iterative refinement against the
    un-jittered system removes the jitter bias on full-rank problems.
    All-zero columns get weight 0.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if n <= d + 1:
        raise ValueError(f"need more than {d + 1} samples, got {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite design or target")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    scale = np.sqrt((Xc * Xc).sum(axis=0))
    scale[scale == 0] = 1.0
    Xs = Xc / scale
    yc = y - y_mean
    G = Xs.T @ Xs
    rhs = Xs.T @ yc
    Gj = G + RIDGE_JITTER * np.eye(d)
    try:
        L = np.linalg.cholesky(Gj)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("rank deficient") from exc

    def solve(b):
        return np.linalg.solve(L.T, np.linalg.solve(L, b))

    w = solve(rhs)
    w = w + solve(rhs - G @ w)
    if not np.all(np.isfinite(w)):
        raise np.linalg.LinAlgError("rank deficient")
    weights = w / scale
    return LinearModel(weights, float(y_mean - x_mean @ weights))
