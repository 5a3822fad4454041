"""Reverse-mode differentiation graph: values, parameters and the backward pass."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_STATE = {"dtype": np.float32, "grad": True}


def default_dtype():
    return _STATE["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new values (64-bit for gradient checks)."""
    previous = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    previous = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = previous


def grad_enabled() -> bool:
    return _STATE["grad"]


class Value:
    """A node in the define-by-run graph holding an array and its gradient."""

    __slots__ = ("data", "_grad", "parents", "backward_rule", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _STATE["dtype"])
        self._grad = None
        self.parents: tuple = ()
        self.backward_rule: Optional[Callable[[np.ndarray], None]] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=self.data.dtype)

    def accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype).reshape(self.data.shape)
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Value":
        return Value(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; rules live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class Parameter(Value):
    """A trainable value with a model-unique name."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def make_output(data: np.ndarray, parents: Iterable[Value], rule) -> Value:
    """Wrap an op result, recording the backward rule only when some parent needs it."""
    out = Value.__new__(Value)
    out.data = data
    out._grad = None
    parents = tuple(parents)
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.parents = parents
        out.backward_rule = rule
        out.requires_grad = True
    else:
        out.parents = ()
        out.backward_rule = None
        out.requires_grad = False
    return out


def _topological_order(root: Value) -> list:
    order, seen = [], {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, children = stack[-1]
        for child in children:
            if child.requires_grad and id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child.parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(root: Value) -> None:
    """Populate ``grad`` on every value reachable from the scalar ``root``."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    root.accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node.backward_rule is not None and node._grad is not None:
            node.backward_rule(node._grad)
