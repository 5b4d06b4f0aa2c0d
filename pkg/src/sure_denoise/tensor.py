"""Minimal reverse-mode autodiff on dense float64 numpy arrays.

A Tensor records the operation that produced it (define-by-run tape);
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into the ``grad`` buffers of requires_grad leaves.
Gradients accumulate across backward calls until ``zero_grad``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[float, int, Sequence, np.ndarray, "Tensor"]

# Module-wide switch for the non-finite abort policy. Every forward kernel
# and every backward contribution is checked while this is True.
FINITE_CHECKS = True


class NumericalError(RuntimeError):
    """A non-finite value (NaN/Inf) was produced by a named op."""


def _ensure_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced by op '{op}'")
    return arr


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad over dims that were broadcast so it matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._bwd: Optional[Callable[[np.ndarray], Iterable]] = None
        self._op = "leaf"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _from_op(data, parents, bwd, op):
        """Wrap a forward result; `bwd(g)` yields (parent, grad) pairs."""
        out = Tensor(_ensure_finite(op, data))
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bwd = bwd
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    # -- elementwise arithmetic -------------------------------------------

    @staticmethod
    def _coerce(x: ArrayLike) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _binop(self, other, fwd, bwd, op):
        other = Tensor._coerce(other)
        try:
            data = fwd(self.data, other.data)
        except ValueError:
            raise ValueError(
                f"shape mismatch in '{op}': {self.shape} vs {other.shape}"
            ) from None
        return Tensor._from_op(data, (self, other), bwd(self, other), op)

    def __add__(self, other):
        return self._binop(
            other, np.add,
            lambda a, b: lambda g: (
                (a, _unbroadcast(g, a.shape)),
                (b, _unbroadcast(g, b.shape)),
            ),
            "add",
        )

    def __sub__(self, other):
        return self._binop(
            other, np.subtract,
            lambda a, b: lambda g: (
                (a, _unbroadcast(g, a.shape)),
                (b, _unbroadcast(-g, b.shape)),
            ),
            "sub",
        )

    def __mul__(self, other):
        return self._binop(
            other, np.multiply,
            lambda a, b: lambda g: (
                (a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)),
            ),
            "mul",
        )

    def __truediv__(self, other):
        return self._binop(
            other, np.divide,
            lambda a, b: lambda g: (
                (a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
            ),
            "div",
        )

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: ((self, -g),), "neg")

    def __radd__(self, other):
        return Tensor._coerce(other).__add__(self)

    def __rsub__(self, other):
        return Tensor._coerce(other).__sub__(self)

    def __rmul__(self, other):
        return Tensor._coerce(other).__mul__(self)

    def __rtruediv__(self, other):
        return Tensor._coerce(other).__truediv__(self)

    def __pow__(self, p: float):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        data = self.data ** p
        return Tensor._from_op(
            data, (self,),
            lambda g: ((self, g * p * self.data ** (p - 1)),),
            "pow",
        )

    def sqrt(self):
        data = np.sqrt(self.data)
        return Tensor._from_op(
            data, (self,), lambda g: ((self, g * 0.5 / np.sqrt(self.data)),), "sqrt"
        )

    def exp(self):
        data = np.exp(self.data)
        return Tensor._from_op(data, (self,), lambda g: ((self, g * data),), "exp")

    def log(self):
        data = np.log(self.data)
        return Tensor._from_op(data, (self,), lambda g: ((self, g / self.data),), "log")

    # -- matmul ------------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = Tensor._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul expects 2-D tensors")
        if self.shape[1] != other.shape[0]:
            raise ValueError(
                f"matmul dimension mismatch: {self.shape} vs {other.shape}"
            )
        a, b = self, other
        return Tensor._from_op(
            a.data @ b.data,
            (a, b),
            lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)),
            "matmul",
        )

    def __matmul__(self, other):
        return self.matmul(other)

    # -- reductions / shaping ---------------------------------------------

    def _normalize_axes(self, axes):
        if axes is None:
            return tuple(range(self.data.ndim))
        if isinstance(axes, int):
            axes = (axes,)
        axes = tuple(a % self.data.ndim if -self.data.ndim <= a < self.data.ndim
                     else a for a in axes)
        for a in axes:
            if not 0 <= a < self.data.ndim:
                raise ValueError(f"invalid axis {a} for shape {self.shape}")
        return axes

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        axes = self._normalize_axes(axes)
        data = self.data.sum(axis=axes, keepdims=keepdims)

        def bwd(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return ((self, np.broadcast_to(g, self.shape)),)

        return Tensor._from_op(data, (self,), bwd, "reduce_sum")

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        axes = self._normalize_axes(axes)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        data = self.data.mean(axis=axes, keepdims=keepdims)

        def bwd(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return ((self, np.broadcast_to(g / count, self.shape)),)

        return Tensor._from_op(data, (self,), bwd, "reduce_mean")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(
            self.data.reshape(shape),
            (self,),
            lambda g: ((self, g.reshape(old)),),
            "reshape",
        )

    def detach(self) -> "Tensor":
        """Same values, no gradient flow through the result."""
        return Tensor(self.data)

    # -- nonlinearities ----------------------------------------------------

    def sigmoid(self) -> "Tensor":
        # exp overflow saturates cleanly to 0/1 in float64; silence the warning
        with np.errstate(over="ignore"):
            out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._from_op(
            out, (self,), lambda g: ((self, g * out * (1.0 - out)),), "sigmoid"
        )

    def relu(self) -> "Tensor":
        out = np.maximum(self.data, 0.0)
        return Tensor._from_op(
            out, (self,), lambda g: ((self, g * (self.data > 0)),), "relu"
        )

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._bwd is None:
                # requires_grad leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in node._bwd(g):
                if not parent.requires_grad:
                    continue
                pg = _ensure_finite(f"backward:{node._op}", np.asarray(pg))
                if id(parent) in flowing:
                    flowing[id(parent)] = flowing[id(parent)] + pg
                else:
                    flowing[id(parent)] = pg

    def zero_grad(self) -> None:
        self.grad = None


# -- convenience constructors ----------------------------------------------

def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))
