"""Minimal reverse-mode differentiation over numpy arrays.

Every op accepts either plain ``np.ndarray`` values or :class:`Tensor`
nodes. When none of the inputs is a ``Tensor`` the op returns a plain
array and records nothing, so model code written against these ops doubles
as the fast inference path.

Only the op set used by the model is covered: broadcasting arithmetic,
batched matmul, ReLU, sigmoid, softmax/log-softmax, reductions, reshapes,
indexing, concatenation and pairwise Euclidean distance.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected method
    __array_ufunc__ = None

    def __init__(self, data, parents: Sequence = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, grad=None):
        backward(self, grad)


def value(x):
    """Underlying array of a tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _node(out, parents, fn):
    if any(isinstance(p, Tensor) for p in parents):
        return Tensor(out, parents, fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable tensor."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Tensor) and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not isinstance(parent, Tensor) or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise -------------------------------------------------------------


def add(a, b):
    va, vb = value(a), value(b)
    return _node(va + vb, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = value(a), value(b)
    return _node(va - vb, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))


def mul(a, b):
    va, vb = value(a), value(b)
    return _node(
        va * vb,
        (a, b),
        lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
    )


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * out / vb, vb.shape)),
    )


def square(a):
    va = value(a)
    return _node(va * va, (a,), lambda g: (2.0 * va * g,))


def relu(a):
    va = value(a)
    mask = va > 0.0
    return _node(np.where(mask, va, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    s = _sigmoid(value(a))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a):
    va = value(a)
    return _node(np.log(va), (a,), lambda g: (g / va,))


# -- linear algebra / reductions ----------------------------------------------


def matmul(a, b):
    va, vb = value(a), value(b)
    out = va @ vb

    def fn(g):
        if va.ndim == 1:
            ga = _unbroadcast(g[..., None, :] @ np.swapaxes(vb, -1, -2), (1,) + va.shape)
            ga = ga.reshape(va.shape)
        else:
            ga = _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape)
        if vb.ndim == 1:
            gb = _unbroadcast(np.swapaxes(va, -1, -2) @ g[..., :, None], vb.shape + (1,)).reshape(vb.shape)
        else:
            gb = _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape)
        return ga, gb

    return _node(out, (a, b), fn)


def sum_(a, axis=None, keepdims=False):
    va = value(a)
    out = va.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return _node(out, (a,), fn)


def mean(a, axis=None, keepdims=False):
    va = value(a)
    count = va.size if axis is None else np.prod([va.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def softmax(a, axis=-1):
    va = value(a)
    e = np.exp(va - va.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _node(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    va = value(a)
    shifted = va - va.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    s = np.exp(out)
    return _node(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# -- shape ---------------------------------------------------------------------


def reshape(a, shape):
    va = value(a)
    return _node(va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def swapaxes(a, ax1, ax2):
    va = value(a)
    return _node(np.swapaxes(va, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx):
    va = value(a)

    def fn(g):
        out = np.zeros_like(va)
        np.add.at(out, idx, g)
        return (out,)

    return _node(va[idx], (a,), fn)


def concat(items: Sequence, axis=-1):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _node(out, tuple(items), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(items: Sequence, axis=0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)
    n = len(vals)
    return _node(
        out,
        tuple(items),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# -- geometry --------------------------------------------------------------------


def pairwise_distance(a):
    """Euclidean distance matrix over the last two axes, ``(..., n, D) -> (..., n, n)``.

    The gradient at coincident points is taken as zero.
    """
    va = value(a)
    lead = va.shape[:-2]
    n, d = va.shape[-2:]
    flat = va.reshape((-1, n, d))
    dist = _kernels.pdist(flat)

    def fn(g):
        gx = _kernels.pdist_backward(flat, dist, g.reshape(dist.shape))
        return (gx.reshape(va.shape),)

    return _node(dist.reshape(lead + (n, n)), (a,), fn)
