"""Minimal reverse-mode automatic differentiation over numpy arrays.

Records a computation graph of array operations and backpropagates a scalar
loss to every tensor marked as requiring gradients. Ops cover exactly what the
navigation model needs (affine maps, gated recurrences, softmax attention,
masked categorical log-probabilities, cosine similarities); everything is
float64. Graph recording can be suspended with `no_grad()` for inference.
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


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g):
        if not (self.requires_grad or self._parents):
            return  # plain constant: gradient is never read
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this (scalar) tensor through the recorded graph."""
        assert self.data.size == 1, "backward() expects a scalar loss"
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and (p.requires_grad or p._parents):
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad or p._parents:
                out = Tensor(data)
                out._parents = parents
                out._backward = backward
                return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's original shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g / (2.0 * out_data))

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def bmv(m: Tensor, v: Tensor) -> Tensor:
    """Batched matrix-vector product: (B, L, D) x (B, D) -> (B, L)."""

    def backward(g):
        m._accumulate(np.einsum("bl,bd->bld", g, v.data))
        v._accumulate(np.einsum("bld,bl->bd", m.data, g))

    return _make(np.einsum("bld,bd->bl", m.data, v.data), (m, v), backward)


def bvm(w: Tensor, m: Tensor) -> Tensor:
    """Batched vector-matrix product: (B, L) x (B, L, D) -> (B, D)."""

    def backward(g):
        w._accumulate(np.einsum("bd,bld->bl", g, m.data))
        m._accumulate(np.einsum("bl,bd->bld", w.data, g))

    return _make(np.einsum("bl,bld->bd", w.data, m.data), (w, m), backward)


# -- reductions and reshaping ---------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            t._accumulate(g[tuple(sl)])
            start += size

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start:stop) of a 2-D tensor."""

    def backward(g):
        if not (a.requires_grad or a._parents):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[:, start:stop] += g

    return _make(a.data[:, start:stop], (a,), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Row gather along the first axis (embedding/context lookup)."""
    idx = np.asarray(idx)

    def backward(g):
        if not (a.requires_grad or a._parents):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _make(a.data[idx], (a,), backward)


def gather(a: Tensor, idx) -> Tensor:
    """out[b] = a[b, idx[b]] for a 2-D tensor."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])

    def backward(g):
        if not (a.requires_grad or a._parents):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (rows, idx), g)

    return _make(a.data[rows, idx], (a, ), backward)


def index0(a: Tensor, i: int) -> Tensor:
    """a[i] along the first axis (a row of a matrix, or a scalar of a vector)."""

    def backward(g):
        if not (a.requires_grad or a._parents):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[i] += g

    return _make(a.data[i], (a,), backward)


def index2(a: Tensor, i: int, j: int) -> Tensor:
    """Scalar a[i, j] of a 2-D tensor."""

    def backward(g):
        if not (a.requires_grad or a._parents):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[i, j] += g

    return _make(a.data[i, j], (a,), backward)


def lerp(a: Tensor, b: Tensor, w: Tensor) -> Tensor:
    """Gated blend (1 - w) * a + w * b, fused into one node."""

    def backward(g):
        a._accumulate(_unbroadcast(g * (1.0 - w.data), a.data.shape))
        b._accumulate(_unbroadcast(g * w.data, b.data.shape))
        w._accumulate(_unbroadcast(g * (b.data - a.data), w.data.shape))

    return _make(a.data + w.data * (b.data - a.data), (a, b, w), backward)


# -- normalized distributions ---------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


def logsumexp(a: Tensor) -> Tensor:
    """Numerically stable log-sum-exp of a 1-D tensor."""
    shift = float(a.data.max())
    return log(tsum(exp(a - shift))) + shift


# -- vector geometry --------------------------------------------------------------


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


def norm(a: Tensor) -> Tensor:
    return sqrt(tsum(mul(a, a)))


def cosine_similarity(a: Tensor, b: Tensor, min_norm: float = 1e-12) -> Tensor:
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na < min_norm or nb < min_norm:
        from .errors import NumericError

        raise NumericError("cosine similarity of a zero-norm vector")
    return div(dot(a, b), mul(norm(a), norm(b)))
