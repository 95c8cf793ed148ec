"""Minimal reverse-mode differentiation over numpy arrays.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients.  ``backward`` walks the tape in reverse
topological order.  Only float64 is exercised by the tests; float32 works but
carries no tolerance guarantees.
"""
from __future__ import annotations

import contextlib

import numpy as np
import scipy.sparse as sp

from .errors import NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference, finite differences)."""
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
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward, name):
    """Create an op output; record the tape only when some parent needs grads."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, name=name, _parents=parents, _backward=backward)
    return Tensor(data, name=name)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                 "maximum")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                 "minimum")


# -- reductions / shape -------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise NumericError("mean of an empty tensor", node="mean")
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")
    inverse = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a, key):
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _node(np.asarray(a.data[key]), (a,), bw, "getitem")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw, "concat")


def broadcast_rows(a, n):
    """Tile a (1, C) or (C,) tensor into (n, C)."""
    a = as_tensor(a)
    row = a.data.reshape(1, -1)
    return _node(np.repeat(row, n, axis=0), (a,),
                 lambda g: (g.sum(axis=0).reshape(a.shape),), "broadcast_rows")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add(out, b)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def take_rows(a, idx):
    """Row gather ``a[idx]``; repeated indices accumulate on the way back."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), bw, "take_rows")


def scatter_rows(a, idx, n):
    """Return an (n, C) tensor whose row idx[i] accumulates a[i]."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(out, idx, a.data)
    return _node(out, (a,), lambda g: (g[idx],), "scatter_rows")


def sparse_matmul(mat, a):
    """``mat @ a`` for a fixed scipy sparse matrix ``mat``."""
    a = as_tensor(a)
    mat = sp.csr_matrix(mat)
    return _node(np.asarray(mat @ a.data), (a,), lambda g: (np.asarray(mat.T @ g),), "sparse_matmul")


def kernel_conv(x, weights, kmap, name="sparse_conv"):
    """Sparse convolution over a ``KernelMap`` as one dense GEMM.

    Narrow inputs are gathered first (im2col); otherwise every input row is
    multiplied by all taps and the products are scattered to outputs.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    taps, c_in, c_out = weights.shape
    n_in, n_out = kmap.n_in, kmap.n_out
    if c_in < c_out:
        gather = kmap.gather_matrix()
        cols = np.asarray(gather @ x.data).reshape(n_out, taps * c_in)
        w2 = weights.data.reshape(taps * c_in, c_out)
        out = cols @ w2

        def bw(g):
            gw = (cols.T @ g).reshape(weights.shape)
            gcols = (g @ w2.T).reshape(n_out * taps, c_in)
            return np.asarray(gather.T @ gcols), gw
    else:
        scatter = kmap.scatter_matrix()
        wcat = weights.data.transpose(1, 0, 2).reshape(c_in, taps * c_out)
        out = np.asarray(scatter @ (x.data @ wcat).reshape(n_in * taps, c_out))

        def bw(g):
            gprod = np.asarray(scatter.T @ g).reshape(n_in, taps * c_out)
            gw = (x.data.T @ gprod).reshape(c_in, taps, c_out).transpose(1, 0, 2)
            return gprod @ wcat.T, gw

    return _node(out, (x, weights), bw, name)


# -- backward -----------------------------------------------------------------

def _toposort(root):
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, store=None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    If ``store`` is given its grads are zeroed first, so parameters that do
    not participate end with exact zeros.
    """
    if store is not None:
        store.zero_grad()
    if loss.data.size != 1:
        raise NumericError("backward needs a scalar loss", node=loss.name)
    order = _toposort(loss)
    for node in order:
        if not np.all(np.isfinite(node.data)):
            raise NumericError(f"non-finite value in forward at node {node.name!r}", node=node.name)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def multihead_attention(q, k, v, heads, return_weights=False):
    """Scaled dot-product attention over ``heads`` column blocks.

    q: (n, D), k and v: (w, D).  Output (n, D).  With ``return_weights`` also
    returns the (heads, n, w) softmax weights as a plain array.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n, dim = q.shape
    w = k.shape[0]
    dh = dim // heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(n, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(w, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(w, heads, dh).transpose(1, 0, 2)
    s = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    s -= s.max(axis=2, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=2, keepdims=True)
    out = np.matmul(a, vh).transpose(1, 0, 2).reshape(n, dim)

    def bw(g):
        gh = g.reshape(n, heads, dh).transpose(1, 0, 2)
        ga = np.matmul(gh, vh.transpose(0, 2, 1))
        gv = np.matmul(a.transpose(0, 2, 1), gh)
        gs = a * (ga - (ga * a).sum(axis=2, keepdims=True)) * scale
        gq = np.matmul(gs, kh)
        gk = np.matmul(gs.transpose(0, 2, 1), qh)
        return (gq.transpose(1, 0, 2).reshape(n, dim),
                gk.transpose(1, 0, 2).reshape(w, dim),
                gv.transpose(1, 0, 2).reshape(w, dim))

    res = _node(out, (q, k, v), bw, "attention")
    return (res, a) if return_weights else res
