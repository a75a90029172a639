"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation records a node on an implicit tape (the
parent links of the resulting :class:`Tensor`).  Backward rules are written
in terms of Tensor operations, so a backward pass run with
``create_graph=True`` records new nodes and its results can be
differentiated again (reverse-over-reverse).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "as_tensor",
    "concatenate",
    "forward",
    "grad",
    "is_grad_enabled",
    "log_softmax",
    "no_grad",
    "softmax",
    "where_positive",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """A gradient was requested for something that is not on the tape."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate operations without recording them."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")


class Tensor:
    """An n-dimensional float64 array, optionally attached to the tape."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out._op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "add")
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return g.sum_to(a_shape), g.sum_to(b_shape)

        return Tensor._result(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "sub")
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return g.sum_to(a_shape), (-g).sum_to(b_shape)

        return Tensor._result(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "mul")
        a, b = self, other

        def backward(g):
            return (g * b).sum_to(a.shape), (g * a).sum_to(b.shape)

        return Tensor._result(self.data * other.data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "div")
        a, b = self, other

        def backward(g):
            ga = (g / b).sum_to(a.shape)
            gb = (-(g * a) / (b * b)).sum_to(b.shape)
            return ga, gb

        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.data / other.data
        return Tensor._result(out, (self, other), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)
        x = self

        def backward(g):
            if p == 1.0:
                return (g,)
            return (g * (x ** (p - 1.0)) * p,)

        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.data**p
        return Tensor._result(out, (self,), backward, "pow")

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError(f"matmul expects 2-d operands, got {self.shape} and {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {self.shape} @ {other.shape}")
        a, b = self, other

        def backward(g):
            return g @ b.T, a.T @ g

        return Tensor._result(self.data @ other.data, (self, other), backward, "matmul")

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    # -- elementwise functions ----------------------------------------

    def square(self) -> "Tensor":
        x = self
        return Tensor._result(self.data * self.data, (self,), lambda g: (g * x * 2.0,), "square")

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = Tensor._result(np.exp(self.data), (self,), lambda g: (g * out,), "exp")
        return out

    def log(self) -> "Tensor":
        x = self
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.log(self.data)
        return Tensor._result(data, (self,), lambda g: (g / x,), "log")

    def tanh(self) -> "Tensor":
        out = Tensor._result(np.tanh(self.data), (self,), lambda g: (g * (1.0 - out * out),), "tanh")
        return out

    def clamp_min(self, value: float) -> "Tensor":
        """``max(x, value)`` elementwise; the subgradient at ``x == value`` is 0."""
        mask = (self.data > value).astype(np.float64)

        def backward(g):
            return (g * mask,)

        return Tensor._result(np.where(mask > 0, self.data, value), (self,), backward, "clamp_min")

    def relu(self) -> "Tensor":
        return self.clamp_min(0.0)

    # -- reductions and shape manipulation ----------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        in_shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def backward(g):
            if not keepdims:
                kept = tuple(1 if i in axes else n for i, n in enumerate(in_shape))
                g = g.reshape(kept)
            return (g.broadcast_to(in_shape),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[i] for i in axes])) if axes else 1
        if count == 0:
            raise ShapeError("mean over an empty axis")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
        return Tensor._result(data, (self,), lambda g: (g.reshape(in_shape),), "reshape")

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError("transpose is defined for 2-d tensors only")
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        in_shape = self.shape
        try:
            data = np.broadcast_to(self.data, shape).copy()
        except ValueError:
            raise ShapeError(f"cannot broadcast {in_shape} to {shape}") from None
        return Tensor._result(data, (self,), lambda g: (g.sum_to(in_shape),), "broadcast_to")

    def sum_to(self, shape) -> "Tensor":
        """Sum out broadcast dimensions so the result has ``shape``."""
        shape = tuple(shape)
        if self.shape == shape:
            return self
        lead = self.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(shape) if n == 1 and self.shape[lead + i] != 1
        )
        out = self.sum(axis=axes, keepdims=True) if axes else self
        return out.reshape(shape)

    def __getitem__(self, index) -> "Tensor":
        index = _freeze_index(index)
        in_shape = self.shape

        def backward(g):
            return (_scatter(g, in_shape, index),)

        try:
            data = self.data[index]
        except IndexError as exc:
            raise ShapeError(str(exc)) from None
        return Tensor._result(np.array(data, dtype=np.float64), (self,), backward, "index")


def _scatter(g: Tensor, shape: tuple[int, ...], index) -> Tensor:
    """Adjoint of indexing: place ``g`` into zeros of ``shape`` at ``index``."""
    out = np.zeros(shape)
    np.add.at(out, index, g.data)

    def backward(gg):
        return (gg[index],)

    return Tensor._result(out, (g,), backward, "scatter")


def _freeze_index(index):
    if isinstance(index, tuple):
        return tuple(np.asarray(i) if isinstance(i, list) else i for i in index)
    if isinstance(index, list):
        return np.asarray(index)
    return index


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast") from None


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def where_positive(x: Tensor) -> np.ndarray:
    """0/1 mask of ``x > 0`` as a plain array (not on the tape)."""
    return (x.data > 0).astype(np.float64)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concatenate needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    ndim = data.ndim
    ax = axis % ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * ndim
            idx[ax] = slice(int(lo), int(hi))
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return Tensor._result(data, tensors, backward, "concatenate")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    # the shift is a constant; softmax is invariant to it, so gradients are exact
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    z = x - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def forward(fn: Callable[..., Tensor], *bindings, requires_grad: bool = True) -> tuple[Tensor, list[Tensor]]:
    """Bind ``bindings`` as tape leaves and evaluate ``fn`` on them.

    Returns the output and the bound leaves so they can be passed to
    :func:`grad`.
    """
    leaves = [Tensor(b, requires_grad=requires_grad) for b in bindings]
    return fn(*leaves), leaves


def _reachable(output: Tensor, targets: set[int]) -> list[Tensor]:
    """Nodes on some path from ``output`` down to a target, in topological order."""
    order: list[Tensor] = []
    relevant: dict[int, bool] = {}
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            hit = key in targets or any(relevant.get(id(p), False) for p in node._parents)
            relevant[key] = hit
            if hit:
                order.append(node)
            continue
        if key in visited:
            continue
        visited.add(key)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    create_graph: bool = False,
    grad_output: Tensor | None = None,
) -> list[Tensor]:
    """Gradients of the scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned tensors are themselves tape
    nodes, so a penalty built from them can be differentiated again.
    Inputs that ``output`` does not depend on get zero gradients.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {output.shape}")
        seed = Tensor(np.ones(output.shape))
    else:
        seed = as_tensor(grad_output)
        if seed.shape != output.shape:
            raise ShapeError(f"grad_output shape {seed.shape} != output shape {output.shape}")
    for i, x in enumerate(inputs):
        if not isinstance(x, Tensor) or not x.requires_grad:
            raise TapeError(f"input {i} is not on the tape (requires_grad is False)")
    if not output.requires_grad:
        return [Tensor(np.zeros(x.shape)) for x in inputs]

    targets = {id(x) for x in inputs}
    order = _reachable(output, targets)
    grads: dict[int, Tensor] = {id(output): seed}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Tensor(np.zeros(x.shape))
        elif not create_graph:
            g = Tensor(g.data) if g.requires_grad else g
        result.append(g)
    return result
