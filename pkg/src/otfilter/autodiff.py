"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ``np.ndarray`` and records the operations applied to
it on a tape (the implicit DAG of parent links).  Calling :meth:`Tensor.backward`
on a scalar node accumulates exact gradients into every leaf that was created
with ``requires_grad=True``.

The primitive set is deliberately small: affine operations (add/sub/mul by
tensors or scalars, matmul, slicing, reshape, concatenation), the two
activations (relu, tanh), square, and the reductions sum/mean.  Anything else
raises :class:`UnsupportedPrimitiveError`.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "UnsupportedPrimitiveError", "concat"]


class UnsupportedPrimitiveError(TypeError):
    """Raised when a differentiable expression uses a primitive outside the supported set."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # Sum out prepended axes.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # Sum over axes that were broadcast from size 1.
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the reverse-mode tape.

    ``data`` is always a float64 ndarray.  ``grad`` is populated by
    :meth:`backward` for nodes with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._bwd = _bwd if self.requires_grad else None

    # -- helpers -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def _lift(other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        if isinstance(other, (int, float, np.floating, np.integer, np.ndarray)):
            return Tensor(other)
        raise UnsupportedPrimitiveError(f"cannot operate on {type(other).__name__}")

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        if self.grad is None:
            # store without copying; accumulation below never mutates in place,
            # so aliasing a gradient shared with another consumer is safe
            self.grad = grad
        else:
            self.grad = self.grad + grad

    # -- affine primitives --------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        out._bwd = bwd if out.requires_grad else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))

        def bwd(g):
            self._accumulate(-g)

        out._bwd = bwd if out.requires_grad else None
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)

        out._bwd = bwd if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedPrimitiveError("division by a tensor is not a supported primitive")
        return self * (1.0 / float(other))

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._lift(other)
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        out._bwd = bwd if out.requires_grad else None
        return out

    __matmul__ = matmul

    def affine(self, weight: "Tensor", bias: "Tensor") -> "Tensor":
        """Fused x @ W + b (single tape node)."""
        weight, bias = self._lift(weight), self._lift(bias)
        out = Tensor(self.data @ weight.data + bias.data,
                     _parents=(self, weight, bias))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g @ weight.data.T)
            if weight.requires_grad:
                weight._accumulate(self.data.T @ g)
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0))

        out._bwd = bwd if out.requires_grad else None
        return out

    def scale_shift(self, scale: np.ndarray, shift: np.ndarray) -> "Tensor":
        """Fused elementwise x * scale + shift with constant coefficients."""
        scale = np.asarray(scale, dtype=np.float64)
        out = Tensor(self.data * scale + shift, _parents=(self,))

        def bwd(g):
            self._accumulate(g * scale)

        out._bwd = bwd if out.requires_grad else None
        return out

    def narrow(self, start: int, size: int, axis: int = -1) -> "Tensor":
        """Contiguous slice of length ``size`` starting at ``start`` along ``axis``."""
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, start + size)
        idx = tuple(idx)
        out = Tensor(self.data[idx], _parents=(self,))

        def bwd(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            self._accumulate(full)

        out._bwd = bwd if out.requires_grad else None
        return out

    def reshape(self, *shape) -> "Tensor":
        out = Tensor(self.data.reshape(*shape), _parents=(self,))

        def bwd(g):
            self._accumulate(g.reshape(self.data.shape))

        out._bwd = bwd if out.requires_grad else None
        return out

    # -- nonlinear primitives ------------------------------------------------

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), _parents=(self,))

        def bwd(g):
            self._accumulate(g * (self.data > 0.0))

        out._bwd = bwd if out.requires_grad else None
        return out

    def tanh(self) -> "Tensor":
        val = np.tanh(self.data)
        out = Tensor(val, _parents=(self,))

        def bwd(g):
            self._accumulate(g * (1.0 - val * val))

        out._bwd = bwd if out.requires_grad else None
        return out

    def square(self) -> "Tensor":
        out = Tensor(self.data * self.data, _parents=(self,))

        def bwd(g):
            self._accumulate(g * (2.0 * self.data))

        out._bwd = bwd if out.requires_grad else None
        return out

    def __pow__(self, p):
        if p == 2:
            return self.square()
        raise UnsupportedPrimitiveError("only squaring is supported; use .square() or **2")

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))

        def bwd(g):
            g = np.asarray(g, dtype=np.float64)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        out._bwd = bwd if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- backward pass ---------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar node into all requires_grad leaves."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar node")
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
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate tensors along ``axis`` (differentiable)."""
    tensors = [Tensor._lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + size)
                t._accumulate(g[tuple(idx)])
            start += size

    out._bwd = bwd if out.requires_grad else None
    return out
