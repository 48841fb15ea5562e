"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy float64 arrays in row-major order. The layout convention
used throughout the library is spatial axes first ([H, W] or [H, W, D]),
then the channel axis, then the batch axis. Every differentiable op records
itself on a dynamic graph; calling ``backward`` on a scalar result walks
the graph in reverse recording order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "NotFiniteError",
    "tensor_from",
    "ewise",
    "add",
    "sub",
    "mul",
    "div",
    "sum_all",
    "backward",
    "zero_grads",
    "finite_diff_grad",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "from_op",
    "assert_finite",
]


class ShapeError(ValueError):
    """Operands do not satisfy an op's shape contract."""


class NotFiniteError(ArithmeticError):
    """A value that must be finite contains NaN or Inf."""


_ids = itertools.count()


class _TapeState(threading.local):
    def __init__(self):
        self.enabled = True


_tape = _TapeState()


@contextmanager
def no_grad():
    """Disable graph recording on the current thread (inference / oracles)."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def grad_enabled() -> bool:
    return _tape.enabled


class Tensor:
    """A float64 array plus its slot in the recorded computation graph.

    Leaf tensors have no parents. Tensors produced by ops carry the op kind,
    the parent tensors, and a closure that routes an incoming output gradient
    to the parents. ``grad``, when populated, always matches ``data`` in shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents=()):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = tuple(parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copy of the value with no graph attached."""
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; all routed through the module-level op constructors
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

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, op={self.op!r})"


@dataclass
class Parameter:
    """A named trainable leaf in a model's registry."""

    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def assert_finite(arr, context: str) -> None:
    a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if not np.all(np.isfinite(a)):
        raise NotFiniteError(f"non-finite values in {context}")


def tensor_from(shape: Sequence[int], values: Sequence[float]) -> Tensor:
    """Construct a tensor from an extent list and flat row-major values."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {list(shape)}")
    vals = np.asarray(list(values), dtype=np.float64)
    n = int(np.prod(shape))
    if vals.size != n:
        raise ShapeError(f"shape {list(shape)} needs {n} values, got {vals.size}")
    if not np.all(np.isfinite(vals)):
        raise NotFiniteError("tensor_from: input values must be finite")
    return Tensor(vals.reshape(shape))


def from_op(data: np.ndarray, parents: tuple, op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, attaching the graph record only while recording."""
    if _tape.enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, op=op, parents=parents)
        out._backward = backward_fn
        return out
    return Tensor(data, op=op)


def _channel_broadcastable(a: Tensor, b: Tensor) -> bool:
    # b is a per-channel vector applied along a's channel axis (axis -2)
    return b.ndim == 1 and a.ndim >= 2 and a.shape[-2] == b.shape[0]


def _expand_channel(b_data: np.ndarray, a_ndim: int) -> np.ndarray:
    # reshape [C] to [1, ..., 1, C, 1] so numpy broadcasting lines up
    return b_data.reshape((1,) * (a_ndim - 2) + (b_data.shape[0], 1))


def _reduce_channel(g: np.ndarray) -> np.ndarray:
    axes = tuple(i for i in range(g.ndim) if i != g.ndim - 2)
    return g.sum(axis=axes)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = a.data + b.data

        def bwd(g):
            a.accumulate_grad(g)
            b.accumulate_grad(g)

    elif _channel_broadcastable(a, b):
        out = a.data + _expand_channel(b.data, a.ndim)

        def bwd(g):
            a.accumulate_grad(g)
            b.accumulate_grad(_reduce_channel(g))

    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return from_op(out, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = a.data - b.data

        def bwd(g):
            a.accumulate_grad(g)
            b.accumulate_grad(-g)

    elif _channel_broadcastable(a, b):
        out = a.data - _expand_channel(b.data, a.ndim)

        def bwd(g):
            a.accumulate_grad(g)
            b.accumulate_grad(-_reduce_channel(g))

    else:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return from_op(out, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = a.data * b.data

        def bwd(g):
            a.accumulate_grad(g * b.data)
            b.accumulate_grad(g * a.data)

    elif _channel_broadcastable(a, b):
        bexp = _expand_channel(b.data, a.ndim)
        out = a.data * bexp

        def bwd(g):
            a.accumulate_grad(g * bexp)
            b.accumulate_grad(_reduce_channel(g * a.data))

    elif b.size == 1:
        out = a.data * b.data.reshape(-1)[0]

        def bwd(g):
            a.accumulate_grad(g * b.data.reshape(-1)[0])
            b.accumulate_grad(np.array([np.sum(g * a.data)]))

    elif a.size == 1:
        return mul(b, a)
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return from_op(out, (a, b), "mul", bwd)


def div(a, b) -> Tensor:
    """Elementwise quotient; shapes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    out = a.data / b.data

    def bwd(g):
        a.accumulate_grad(g / b.data)
        b.accumulate_grad(-g * a.data / (b.data * b.data))

    return from_op(out, (a, b), "div", bwd)


_EWISE = {"add": add, "sub": sub, "mul": mul}


def ewise(op_kind: str, a, b) -> Tensor:
    """Dispatch an elementwise op by kind ('add' | 'sub' | 'mul')."""
    try:
        fn = _EWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown ewise op kind {op_kind!r}") from None
    return fn(a, b)


def sum_all(a) -> Tensor:
    """Sum every element into a shape-[1] tensor."""
    a = as_tensor(a)
    out = np.array([a.data.sum()])

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, g[0]))

    return from_op(out, (a,), "sum", bwd)


def zero_grads(parameters: Iterable[Parameter]) -> None:
    for p in parameters:
        p.tensor.grad = None


def backward(loss: Tensor, parameters: Iterable[Parameter] = ()) -> dict[str, Tensor]:
    """Backpropagate from a scalar loss; map trainable parameter names to grads.

    Parameters not reached by the sweep get zero gradients.
    """
    loss.backward()
    grads: dict[str, Tensor] = {}
    for p in parameters:
        if not p.trainable:
            continue
        g = p.tensor.grad
        grads[p.name] = Tensor(np.zeros_like(p.data)) if g is None else Tensor(g.copy())
    return grads


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     eps: float = 1e-6) -> Tensor:
    """Central-difference gradient estimate of a scalar function at x.

    Perturbs one element at a time: (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps).
    Stays off the graph entirely; the analytic path never feeds this oracle.
    """
    if eps <= 0:
        raise ValueError("finite_diff_grad: eps must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _eval_scalar(f, x)
            flat[i] = orig - eps
            fm = _eval_scalar(f, x)
            flat[i] = orig
            val = (fp - fm) / (2.0 * eps)
            if not np.isfinite(val):
                raise NotFiniteError("finite_diff_grad: non-finite evaluation")
            out[i] = val
    return Tensor(out.reshape(x.shape))


def _eval_scalar(f, x) -> float:
    r = f(x)
    if isinstance(r, Tensor):
        return r.item()
    r = float(r)
    if not np.isfinite(r):
        raise NotFiniteError("finite_diff_grad: non-finite evaluation")
    return r
