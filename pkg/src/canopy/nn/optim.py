import math

import numpy as np


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied as ``p -= lr * wd * p`` before the moment update; parameters
    flagged ``weight_decay_exempt`` (biases, normalisation scales) skip it.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and not getattr(p, "weight_decay_exempt", False):
                p.data = p.data - lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        state = {"step_count": np.array([self.step_count], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m.copy()
            state[f"v.{i}"] = v.copy()
        return state

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"][0])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m.{i}"]
            self.v[i][...] = state[f"v.{i}"]


def cosine_warm_restart_lr(epoch, lr_max=1e-3, lr_min=0.0, t0=10, t_mult=2):
    """Learning rate at ``epoch`` for cosine annealing with warm restarts.

    Cycle ``i`` lasts ``t0 * t_mult**i`` epochs; each cycle starts at ``lr_max``.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t_i = t0
    t_cur = epoch
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= t_mult
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


def cycle_boundaries(total_epochs, t0=10, t_mult=2):
    """Cumulative epochs at which restarts happen, up to ``total_epochs``."""
    out = []
    acc, t_i = 0, t0
    while acc + t_i <= total_epochs:
        acc += t_i
        out.append(acc)
        t_i *= t_mult
    return out
