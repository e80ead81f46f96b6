import numpy as np

from .autograd import Tensor
from . import functional as F


class Parameter(Tensor):
    __slots__ = ("weight_decay_exempt",)

    def __init__(self, data, name=None, weight_decay_exempt=False):
        super().__init__(data, requires_grad=True, name=name)
        self.weight_decay_exempt = weight_decay_exempt


class Module:
    """Container with named parameters, buffers and a train/eval flag."""

    training = True

    def _children(self):
        """(name, module) pairs, descending into (nested) lists and tuples."""
        out = []

        def walk(name, val):
            if isinstance(val, Module):
                out.append((name, val))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    walk(f"{name}.{i}", item)

        for key, val in vars(self).items():
            walk(key, val)
        return out

    def named_parameters(self, prefix=""):
        out = [(f"{prefix}{k}", v) for k, v in vars(self).items() if isinstance(v, Parameter)]
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        out = [(f"{prefix}{k}", getattr(self, k)) for k in getattr(self, "_buffer_names", ())]
        for name, child in self._children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
        for name, b in buffers.items():
            b[...] = state[name]

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


def he_normal(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = Parameter(he_normal(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out), weight_decay_exempt=True) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(channels), weight_decay_exempt=True)
        self.beta = Parameter(np.zeros(channels), weight_decay_exempt=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)
