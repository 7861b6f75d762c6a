"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation records a backward closure on its output, and
``Tensor.backward()`` replays them in reverse topological order. Storage is
float64 so finite-difference oracles are trustworthy. Graphs are rebuilt on
every forward pass and confined to a single worker; gradient-free tensors are
immutable and safe to share.
"""

from __future__ import annotations

import itertools

import numpy as np

DTYPE = np.float64

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GraphError(RuntimeError):
    """Misuse of the gradient graph (e.g. backward on a non-scalar)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        # Leaf parameters start with an all-zero grad so a parameter that never
        # participates in a backward pass reports exactly zero gradient.
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node_id = next(_node_ids)
        self._prev = ()
        self._backward = None

    @classmethod
    def _op(cls, data: np.ndarray, inputs: tuple) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = any(i.requires_grad for i in inputs)
        t.grad = None
        t.node_id = next(_node_ids)
        t._prev = tuple(i for i in inputs if i.requires_grad) if t.requires_grad else ()
        t._backward = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        """Populate gradients of every reachable requires-grad tensor.

        The loss must be scalar. Leaf gradients accumulate across repeated
        calls; intermediate gradients are recomputed from scratch each call.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _topo_order(self)
        for node in order:
            if node._prev:
                node.grad = None
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + 1.0
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __radd__(self, other):
        return shift(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over the op graph (acyclic by construction)."""
    order, visited, stack = [], set(), [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        if idx < len(node._prev):
            stack.append((node, idx + 1))
            child = node._prev[idx]
            if id(child) not in visited:
                stack.append((child, 0))
        else:
            order.append(node)
    return order


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        assert g.shape == t.data.shape
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out axes that numpy broadcasting introduced or stretched."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._op(a.data + b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._op(a.data - b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = Tensor._op(ad * bd, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accum(a, _unbroadcast(g * bd, ad.shape))
            _accum(b, _unbroadcast(g * ad, bd.shape))
        out._backward = bwd
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor._op(a.data * s, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * s)
    return out


def shift(a: Tensor, c: float) -> Tensor:
    out = Tensor._op(a.data + float(c), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor._op(np.where(mask, a.data, 0.0), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * mask)
    return out


def log(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor._op(np.log(ad), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g / ad)
    return out


# shape manipulation -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, optionally batched over equal leading axes."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul requires at least 2-D operands")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = Tensor._op(ad @ bd, (a, b))
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(a, g @ np.swapaxes(bd, -1, -2))
            if b.requires_grad:
                _accum(b, np.swapaxes(ad, -1, -2) @ g)
        out._backward = bwd
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor._op(np.transpose(a.data, axes), (a,))
    if out.requires_grad:
        inv = None if axes is None else tuple(np.argsort(axes))
        out._backward = lambda g: _accum(a, np.transpose(g, inv))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = Tensor._op(a.data.reshape(shape), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.reshape(old))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])
        out._backward = bwd
    return out


def take(a: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; backward scatter-adds into the source."""
    out = Tensor._op(a.data[key], (a,))
    if out.requires_grad:
        shape = a.data.shape
        def bwd(g):
            buf = np.zeros(shape, dtype=DTYPE)
            np.add.at(buf, key, g)
            _accum(a, buf)
        out._backward = bwd
    return out


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup into an embedding matrix; duplicate indices accumulate."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor._op(table.data[idx], (table,))
    if out.requires_grad:
        shape = table.data.shape
        def bwd(g):
            buf = np.zeros(shape, dtype=DTYPE)
            np.add.at(buf, idx, g)
            _accum(table, buf)
        out._backward = bwd
    return out


def pick(p: Tensor, rows, cols) -> Tensor:
    """Select p[rows[i], cols[i]] as a 1-D tensor (class-indexed probabilities)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = Tensor._op(p.data[rows, cols], (p,))
    if out.requires_grad:
        shape = p.data.shape
        def bwd(g):
            buf = np.zeros(shape, dtype=DTYPE)
            np.add.at(buf, (rows, cols), g)
            _accum(p, buf)
        out._backward = bwd
    return out


# reductions -------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._op(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        shape = a.data.shape
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, shape).copy())
        out._backward = bwd
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor._op(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        shape = a.data.shape
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g / n, shape).copy())
        out._backward = bwd
    return out


# stabilised nonlinearities ---------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction; safe for any finite input."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._op(y, (a,))
    if out.requires_grad:
        def bwd(g):
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (g - inner))
        out._backward = bwd
    return out


def softplus(a: Tensor, beta: float = 1.0) -> Tensor:
    """beta * log(1 + exp(x / beta)); strictly positive, overflow-free."""
    if beta <= 0:
        raise ValueError("softplus softness must be positive")
    z = a.data / beta
    y = beta * (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))))
    # exp underflow below z ~ -745 would yield exactly 0; keep the output
    # strictly positive as the math promises.
    y = np.maximum(y, np.finfo(DTYPE).tiny)
    out = Tensor._op(y, (a,))
    if out.requires_grad:
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        out._backward = lambda g: _accum(a, g * sig)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._op(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def bwd(g):
            lead = tuple(range(g.ndim - 1))
            _accum(gain, (g * xhat).sum(axis=lead))
            _accum(bias, g.sum(axis=lead))
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv * (dxhat - m1 - xhat * m2))
        out._backward = bwd
    return out


def dropout(x: Tensor, p: float, rng=None, train: bool = False) -> Tensor:
    """Inverted dropout: identity at inference, scaled mask under a seeded rng."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("training-mode dropout requires a seeded rng")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = Tensor._op(x.data * mask, (x,))
    if out.requires_grad:
        out._backward = lambda g: _accum(x, g * mask)
    return out
