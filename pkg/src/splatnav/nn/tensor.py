"""Reverse-mode autodiff over numpy arrays.

A :class:`Tensor` produced by an op remembers its inputs and a closure
mapping the output gradient to input gradients. ``backward`` walks the
graph once and then releases it, so a second call without a fresh forward
pass is a usage error.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import NonFiniteError, UsageError

DEFAULT_DTYPE = np.float32

_state = {"grad": True, "nan_guard": True}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_nan_guard(enabled: bool) -> None:
    _state["nan_guard"] = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or getattr(data, "dtype", None) or DEFAULT_DTYPE)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{', grad' if self.requires_grad else ''})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self._backward is None:
            raise UsageError("backward called on a tensor with no recorded graph "
                             "(a leaf, a no_grad result, or a graph already consumed)")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            for p, gp in zip(node._prev, node._backward(g)):
                if gp is None or not (p.requires_grad or p._backward is not None):
                    continue
                gp = _unbroadcast(gp, p.shape).astype(p.data.dtype, copy=False)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + gp
                else:
                    grads[id(p)] = gp
        for node in order:
            node._prev = ()
            node._backward = None

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def Parameter(data, name=None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def make(data, parents, backward) -> Tensor:
    """Wrap an op result, recording the graph when any parent needs gradients."""
    if _state["nan_guard"] and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad or p._backward is not None for p in parents):
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _pair(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return a, b


def add(a, b):
    a, b = _pair(a, b)
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _pair(a, b)
    return make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _pair(a, b)
    return make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def matmul(a, b):
    a, b = _pair(a, b)
    return make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make(out, (a,), lambda g: (g / a.data,))


def square(a):
    a = as_tensor(a)
    return make(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data <= b.data
    return make(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[k] for k in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a, idx):
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return make(a.data[idx], (a,), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                lambda g: tuple(np.split(g, sizes, axis=axis)))
