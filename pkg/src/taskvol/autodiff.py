"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: each operation records its parents and a closure
that maps the output gradient to parent-gradient contributions.  ``backward``
walks the tape in reverse topological order and accumulates into ``.grad``.
Parameters are long-lived Tensors whose gradients accumulate across calls
until ``zero_grad``; everything else is per-graph.

Only the operations the model needs are implemented.  The 3D convolution is
a primitive backed by ``taskvol.kernels`` (compiled core or numpy fallback);
all other operations are numpy compositions.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np

from . import kernels

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...],
                vjp: Callable[[np.ndarray], tuple]) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return Tensor._result(
                self.data + other.data, (self, other),
                lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))
        return Tensor._result(self.data + other, (self,),
                              lambda g: (_unbroadcast(g, self.shape),))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return Tensor._result(
                self.data - other.data, (self, other),
                lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))
        return Tensor._result(self.data - other, (self,),
                              lambda g: (_unbroadcast(g, self.shape),))

    def __rsub__(self, other):
        return Tensor._result(other - self.data, (self,),
                              lambda g: (_unbroadcast(-g, self.shape),))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return Tensor._result(
                self.data * other.data, (self, other),
                lambda g: (_unbroadcast(g * other.data, self.shape),
                           _unbroadcast(g * self.data, other.shape)))
        return Tensor._result(self.data * other, (self,),
                              lambda g: (_unbroadcast(g * other, self.shape),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return Tensor._result(
                self.data / other.data, (self, other),
                lambda g: (_unbroadcast(g / other.data, self.shape),
                           _unbroadcast(-g * self.data / other.data ** 2, other.shape)))
        return Tensor._result(self.data / other, (self,),
                              lambda g: (_unbroadcast(g / other, self.shape),))

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only constant exponents are supported")
        data = self.data ** p
        if p == 0:
            return Tensor._result(data, (self,), lambda g: (np.zeros_like(self.data),))
        return Tensor._result(data, (self,),
                              lambda g: (g * p * self.data ** (p - 1),))

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self.data, other.data
        # promote 1-D operands to matrices, then drop the same axes numpy's
        # matmul drops, so the vjp can always use matrix algebra
        a2 = a.reshape(1, -1) if a.ndim == 1 else a
        b2 = b.reshape(-1, 1) if b.ndim == 1 else b
        out = a2 @ b2
        if b.ndim == 1:
            out = np.squeeze(out, axis=-1)
        if a.ndim == 1:
            out = np.squeeze(out, axis=-1 if b.ndim == 1 else -2)

        def vjp(g):
            g2 = np.asarray(g)
            if a.ndim == 1:
                g2 = np.expand_dims(g2, -1 if b.ndim == 1 else -2)
            if b.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            ga = g2 @ np.swapaxes(b2, -1, -2)
            gb = np.swapaxes(a2, -1, -2) @ g2
            return (_unbroadcast(ga, a2.shape).reshape(a.shape),
                    _unbroadcast(gb, b2.shape).reshape(b.shape))

        return Tensor._result(out, (self, other), vjp)

    # -- shape ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.data.reshape(shape), (self,),
                              lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,),
                              lambda g: (g.transpose(inv),))

    def __getitem__(self, idx):
        def vjp(g):
            out = np.zeros_like(self.data)
            out[idx] = g
            return (out,)

        return Tensor._result(self.data[idx], (self,), vjp)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.shape).copy(),)

        return Tensor._result(data, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- pointwise nonlinearities --------------------------------------------

    def exp(self):
        data = np.exp(self.data)
        return Tensor._result(data, (self,), lambda g: (g * data,))

    def log(self):
        return Tensor._result(np.log(self.data), (self,),
                              lambda g: (g / self.data,))

    def tanh(self):
        data = np.tanh(self.data)
        return Tensor._result(data, (self,), lambda g: (g * (1.0 - data ** 2),))

    def sigmoid(self):
        data = _sigmoid(self.data)
        return Tensor._result(data, (self,), lambda g: (g * data * (1.0 - data),))

    def softplus(self):
        x = self.data
        data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        return Tensor._result(data, (self,), lambda g: (g * _sigmoid(x),))

    def gelu(self):
        x = self.data
        c = np.sqrt(2.0 / np.pi)
        u = c * (x + 0.044715 * x ** 3)
        t = np.tanh(u)
        data = 0.5 * x * (1.0 + t)

        def vjp(g):
            du = c * (1.0 + 3 * 0.044715 * x ** 2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

        return Tensor._result(data, (self,), vjp)

    # -- backward ------------------------------------------------------------

    def backward(self, gradient: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        if gradient is None:
            if self.data.size != 1:
                raise ValueError("gradient argument required for non-scalar output")
            gradient = np.ones_like(self.data)

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(gradient, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if not parent.requires_grad or pg is None:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = np.array(pg, dtype=parent.data.dtype, copy=True)
            else:
                # leaf: accumulate into persistent .grad
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(ts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return Tensor._result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup with scatter-add gradient into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor._result(table.data[ids], (table,), vjp)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: int) -> Tensor:
    """Strided 3D convolution primitive, channel-first layout."""
    data = kernels.conv3d_forward(x.data, w.data, None if b is None else b.data,
                                  stride, pad)
    k = w.shape[2]
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv3d_backward_input(g, w.data, stride, pad, x.shape) \
            if x.requires_grad else None
        if w.requires_grad or (b is not None and b.requires_grad):
            gw, gb = kernels.conv3d_backward_weights(x.data, g, stride, pad, k)
        else:
            gw, gb = None, None
        if b is None:
            return (gx, gw)
        return (gx, gw, gb)

    return Tensor._result(data, parents, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is treated as a constant,
    which leaves the gradient of the computed value exact."""
    shift = x - x.data.max(axis=axis, keepdims=True)
    e = shift.exp()
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias
