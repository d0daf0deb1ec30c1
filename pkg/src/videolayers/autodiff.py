"""Minimal reverse-mode autodiff over numpy arrays.

Vectorized tape engine: a Tensor wraps an ndarray, ops record backward
closures, and ``backward()`` walks the tape in reverse topological order.
Accumulation order is fixed by construction order, so gradients are
bit-reproducible for a fixed graph. Ops skip tape construction entirely
when no input requires grad (inference costs nothing extra).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._bw = None

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, fresh: bool = False):
        """Add g into this tensor's grad.

        ``fresh`` promises g is a newly allocated array no other node holds,
        letting us adopt it without the defensive copy.
        """
        if self.grad is None:
            if fresh and g.dtype == self.data.dtype:
                self.grad = g
            else:
                # copy so later in-place += never aliases an op's buffer
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- graph -------------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    # -- operator sugar ----------------------------------------------------

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
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wants_grad(*xs) -> bool:
    return _GRAD_ENABLED and any(
        isinstance(x, Tensor) and x.requires_grad for x in xs
    )


def _attach(out: Tensor, parents, bw):
    out.requires_grad = True
    out._parents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    out._bw = bw
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    if _wants_grad(a, b):
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.data.shape))
        _attach(out, (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    if _wants_grad(a, b):
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g, b.data.shape))
        _attach(out, (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    if _wants_grad(a, b):
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))
        _attach(out, (a, b), bw)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    if _wants_grad(a, b):
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(
                    _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
                )
        _attach(out, (a, b), bw)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data)
    if _wants_grad(a, b):
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T, fresh=True)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g, fresh=True)
        _attach(out, (a, b), bw)
    return out


def mlp_forward(x, weights, biases, hidden_activation: str):
    """Fused multi-layer perceptron: one tape node for the whole net.

    Equivalent to chained matmul/add/activation ops but with hand-rolled
    backprop (saves tape and temporary-array overhead on hot paths).
    Returns the raw (pre-squash) output.
    """
    xt = as_tensor(x)
    n_layers = len(weights)
    hs = [xt.data]
    h = xt.data
    for i in range(n_layers):
        z = h @ weights[i].data
        z += biases[i].data
        if i < n_layers - 1:
            if hidden_activation == "tanh":
                np.tanh(z, out=z)
            else:
                np.maximum(z, 0.0, out=z)
            hs.append(z)
        h = z
    out = Tensor(h)
    if _wants_grad(xt, *weights, *biases):

        def bw(g):
            delta = g
            for i in range(n_layers - 1, -1, -1):
                if weights[i].requires_grad:
                    weights[i].accumulate_grad(hs[i].T @ delta, fresh=True)
                if biases[i].requires_grad:
                    biases[i].accumulate_grad(delta.sum(axis=0), fresh=True)
                if i == 0:
                    if xt.requires_grad:
                        xt.accumulate_grad(delta @ weights[0].data.T, fresh=True)
                    break
                delta = delta @ weights[i].data.T
                y = hs[i]
                if hidden_activation == "tanh":
                    delta *= 1.0 - y * y
                else:
                    delta *= y > 0

        _attach(out, (xt, *weights, *biases), bw)
    return out


# -- elementwise nonlinearities ----------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    if _wants_grad(a):
        def bw(g):
            a.accumulate_grad(g * y)
        _attach(out, (a,), bw)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    if _wants_grad(a):
        def bw(g):
            a.accumulate_grad(g / a.data)
        _attach(out, (a,), bw)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    if _wants_grad(a):
        def bw(g):
            a.accumulate_grad(g * (1.0 - y * y))
        _attach(out, (a,), bw)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # numerically stable two-sided form
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    out = Tensor(y)
    if _wants_grad(a):
        def bw(g):
            a.accumulate_grad(g * y * (1.0 - y))
        _attach(out, (a,), bw)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    if _wants_grad(a):
        def bw(g):
            a.accumulate_grad(g * 0.5 / y)
        _attach(out, (a,), bw)
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    if _wants_grad(a):
        def bw(g):
            a.accumulate_grad(g * 2.0 * a.data)
        _attach(out, (a,), bw)
    return out


def absolute(a) -> Tensor:
    # subgradient 0 at exactly 0
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    if _wants_grad(a):
        s = np.sign(a.data)
        def bw(g):
            a.accumulate_grad(g * s)
        _attach(out, (a,), bw)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    if _wants_grad(a):
        inside = (a.data >= lo) & (a.data <= hi)
        def bw(g):
            a.accumulate_grad(g * inside)
        _attach(out, (a,), bw)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    if _wants_grad(a):
        pos = a.data > 0
        def bw(g):
            a.accumulate_grad(g * pos)
        _attach(out, (a,), bw)
    return out


# -- reductions & shaping ------------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))
    if _wants_grad(a):
        def bw(g):
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.data.shape))
            else:
                a.accumulate_grad(
                    np.broadcast_to(np.expand_dims(g, axis), a.data.shape)
                )
        _attach(out, (a,), bw)
    return out


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def tmax(a, axis) -> Tensor:
    """Max along an axis; gradient routes to the (first) argmax."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = Tensor(np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis))
    if _wants_grad(a):
        def bw(g):
            ga = np.zeros_like(a.data)
            np.put_along_axis(
                ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
            )
            a.accumulate_grad(ga)
        _attach(out, (a,), bw)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    if _wants_grad(a):
        def bw(g):
            a.accumulate_grad(g.reshape(a.data.shape))
        _attach(out, (a,), bw)
    return out


def concat(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    if _wants_grad(*parts):
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        def bw(g):
            for p, gp in zip(parts, np.split(g, splits, axis=axis)):
                if p.requires_grad:
                    p.accumulate_grad(gp)
        _attach(out, parts, bw)
    return out


def _key_may_alias(key) -> bool:
    """Integer-array keys can repeat indices; slices/ints never do."""
    if isinstance(key, tuple):
        return any(_key_may_alias(k) for k in key)
    return isinstance(key, (np.ndarray, list))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[key])
    if _wants_grad(a):
        def bw(g):
            ga = np.zeros_like(a.data)
            if _key_may_alias(key):
                np.add.at(ga, key, g)
            else:
                ga[key] += g
            a.accumulate_grad(ga)
        _attach(out, (a,), bw)
    return out


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.where(cond, a.data, b.data))
    if _wants_grad(a, b):
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(np.where(cond, g, 0.0), a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(np.where(cond, 0.0, g), b.data.shape))
        _attach(out, (a, b), bw)
    return out


def gather_rows(table, idx: np.ndarray) -> Tensor:
    """table[(idx,)] for a 2D table; backward scatters via bincount."""
    table = as_tensor(table)
    out = Tensor(table.data[idx])
    if _wants_grad(table):
        def bw(g):
            rows = table.data.shape[0]
            gt = np.empty_like(table.data)
            flat = idx.ravel()
            g2 = g.reshape(-1, table.data.shape[1])
            for f in range(table.data.shape[1]):
                gt[:, f] = np.bincount(flat, weights=g2[:, f], minlength=rows)
            table.accumulate_grad(gt)
        _attach(out, (table,), bw)
    return out


def parameter(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=True)
