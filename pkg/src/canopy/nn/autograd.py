"""Minimal reverse-mode autodiff over float64 numpy buffers.

Every differentiable op builds a new :class:`Tensor` holding its parents and a
closure mapping the upstream gradient to one gradient per parent.  Nodes get
a monotonically increasing id at creation, so sorting by id gives a valid
topological order and a fixed accumulation order for ``backward``.
"""
import itertools
from contextlib import contextmanager

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward",
                 "_id", "_consumed", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self._consumed = False

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # arithmetic ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)

    def mean(self):
        return mul(total(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    # reverse sweep -----------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss, got shape %s" % (self.shape,))
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild the forward pass")
        nodes = _topo(self)
        grads = {self._id: np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._id in grads:
                    grads[p._id] = grads[p._id] + pg
                else:
                    grads[p._id] = pg
        for node in nodes:
            node._consumed = True
            node._parents = ()
            node._backward = None
        self._consumed = True


def _topo(root):
    seen = set()
    out = []
    stack = [root]
    while stack:
        n = stack.pop()
        if n._id in seen:
            continue
        seen.add(n._id)
        out.append(n)
        stack.extend(p for p in n._parents if p.requires_grad)
    out.sort(key=lambda t: t._id, reverse=True)
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward):
    """Wrap an op result; record it on the tape when any parent needs grad."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def neg(a):
    return make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b),
                lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    return make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def total(a):
    shape = a.shape
    return make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a, shape):
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))
