"""Minimal reverse-mode differentiation tape over numpy arrays.

A Tape records every traced operation in creation order; backward walks the
node list once in reverse, accumulating gradients into watched Parameters.
Tapes are single-use and thread-local-free: independent tapes can run on
independent threads, while one tape must stay on one thread.

Usage:
    with Tape() as tape:
        y = tanh(matmul(x, w) + b)      # w, b are Parameters, x an ndarray
        loss = mean(y * y)
    tape.backward(loss)                  # fills w.grad, b.grad
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit

_STACK = threading.local()


def _active_tape():
    stack = getattr(_STACK, "tapes", None)
    if not stack:
        raise RuntimeError("no active Tape; wrap traced code in `with Tape():`")
    return stack[-1]


class Parameter:
    """Trainable leaf: a mutable array with a gradient accumulator."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str = ""):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    @property
    def shape(self):
        return self.value.shape


class Node:
    """One traced value; parents and a backward closure for the chain rule."""

    __slots__ = ("value", "parents", "bwd", "_g")

    def __init__(self, value, parents=(), bwd=None):
        self.value = value
        self.parents = parents
        self.bwd = bwd
        self._g = None

    @property
    def shape(self):
        return np.shape(self.value)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


class Tape:
    """Ordered record of traced nodes; single-use backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._watched: dict[int, tuple[Parameter, Node]] = {}
        self._spent = False

    def __enter__(self):
        stack = getattr(_STACK, "tapes", None)
        if stack is None:
            stack = []
            _STACK.tapes = stack
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.tapes.pop()
        return False

    def _record(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    def watch(self, param: Parameter) -> Node:
        """Leaf node for a Parameter; repeated calls share one node."""
        entry = self._watched.get(id(param))
        if entry is None:
            leaf = self._record(Node(param.value.copy()))
            self._watched[id(param)] = (param, leaf)
            return leaf
        return entry[1]

    def backward(self, output: Node) -> None:
        """Accumulate d(output)/d(param) into every watched Parameter."""
        if self._spent:
            raise RuntimeError("tape already consumed by a backward pass")
        if np.size(output.value) != 1:
            raise ValueError("backward requires a scalar output node")
        self._spent = True
        output._g = np.ones_like(np.asarray(output.value, dtype=float))
        for node in reversed(self.nodes):
            if node._g is None or node.bwd is None:
                continue
            node.bwd(node._g)
        for param, leaf in self._watched.values():
            if leaf._g is not None:
                param.grad += leaf._g
        for node in self.nodes:
            node._g = None


def _lift(x) -> Node:
    """Coerce to a Node: Parameters are watched, plain arrays are constants."""
    if isinstance(x, Node):
        return x
    if isinstance(x, Parameter):
        return _active_tape().watch(x)
    return Node(np.asarray(x, dtype=float))


def _accumulate(node: Node, grad):
    if node._g is None:
        node._g = np.array(grad, dtype=float, copy=True)
    else:
        node._g = node._g + grad


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, value, bwd_a, bwd_b):
    a, b = _lift(a), _lift(b)

    def bwd(g):
        _accumulate(a, _unbroadcast(bwd_a(g), a.shape))
        _accumulate(b, _unbroadcast(bwd_b(g), b.shape))

    return _active_tape()._record(Node(value(a.value, b.value), (a, b), bwd))


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = _lift(a), _lift(b)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _active_tape()._record(Node(a.value * b.value, (a, b), bwd))


def div(a, b):
    a, b = _lift(a), _lift(b)

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.value, a.shape))
        _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    return _active_tape()._record(Node(a.value / b.value, (a, b), bwd))


def matmul(a, b):
    a, b = _lift(a), _lift(b)

    def bwd(g):
        g = np.asarray(g)
        if a.value.ndim == 1:
            _accumulate(a, g @ b.value.T)
            _accumulate(b, np.outer(a.value, g))
        else:
            _accumulate(a, g @ b.value.T)
            _accumulate(b, a.value.T @ g)

    return _active_tape()._record(Node(a.value @ b.value, (a, b), bwd))


def _unary(a, value, local_grad):
    a = _lift(a)
    out_value = value(a.value)

    def bwd(g):
        _accumulate(a, g * local_grad(a.value, out_value))

    return _active_tape()._record(Node(out_value, (a,), bwd))


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a):
    # subgradient 0 at the origin so L2-norm style rewards stay finite
    return _unary(a, np.sqrt,
                  lambda x, y: np.where(x > 0.0, 0.5 / np.where(x > 0.0, y, 1.0), 0.0))


def softplus(a):
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: expit(x))


def absolute(a):
    return _unary(a, np.abs, lambda x, y: np.sign(x))


def clip(a, lo: float, hi: float):
    """Clamp to constants; gradient passes only inside the band."""
    return _unary(a, lambda x: np.clip(x, lo, hi),
                  lambda x, y: ((x >= lo) & (x <= hi)).astype(float))


def minimum(a, b):
    """Elementwise min; the gradient follows the smaller branch (ties -> a)."""
    a, b = _lift(a), _lift(b)
    mask = a.value <= b.value

    def bwd(g):
        _accumulate(a, _unbroadcast(g * mask, a.shape))
        _accumulate(b, _unbroadcast(g * ~mask, b.shape))

    return _active_tape()._record(
        Node(np.minimum(a.value, b.value), (a, b), bwd))


def where(mask, a, b):
    """Select by a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _lift(a), _lift(b)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * mask, a.shape))
        _accumulate(b, _unbroadcast(g * ~mask, b.shape))

    return _active_tape()._record(
        Node(np.where(mask, a.value, b.value), (a, b), bwd))


def vsum(a, axis=None):
    a = _lift(a)
    in_shape = a.shape

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, in_shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), in_shape))

    return _active_tape()._record(Node(np.sum(a.value, axis=axis), (a,), bwd))


def mean(a, axis=None):
    a = _lift(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / count)


def take(a, key):
    a = _lift(a)
    in_shape = a.shape

    def bwd(g):
        full = np.zeros(in_shape)
        np.add.at(full, key, g)
        _accumulate(a, full)

    return _active_tape()._record(Node(a.value[key], (a,), bwd))


def reshape(a, shape):
    a = _lift(a)
    in_shape = a.shape

    def bwd(g):
        _accumulate(a, np.reshape(g, in_shape))

    return _active_tape()._record(Node(np.reshape(a.value, shape), (a,), bwd))


def concat(parts):
    parts = [_lift(p) for p in parts]
    sizes = [np.shape(p.value)[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(part, g[lo:hi])

    return _active_tape()._record(
        Node(np.concatenate([p.value for p in parts]), tuple(parts), bwd))


def stack_scalars(parts):
    return concat([reshape(p, (1,)) for p in parts])


def detach(a) -> Node:
    """Constant copy: values flow, gradients stop."""
    a = _lift(a)
    return Node(np.array(a.value, copy=True))


def value_of(a):
    return a.value if isinstance(a, Node) else np.asarray(a, dtype=float)
