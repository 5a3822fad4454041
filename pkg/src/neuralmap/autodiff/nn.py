"""Small layer containers built on the graph ops."""

from __future__ import annotations

import numpy as np

from . import ops
from .core import Parameter, Value
from .init import constant, glorot_uniform, orthogonal


class Module:
    """Collects parameters from attributes, in attribute order."""

    def parameters(self) -> list[Parameter]:
        found, seen = [], set()

        def visit(obj):
            if isinstance(obj, Parameter):
                if id(obj) not in seen:
                    seen.add(id(obj))
                    found.append(obj)
            elif isinstance(obj, Module):
                for v in vars(obj).values():
                    visit(v)
            elif isinstance(obj, (list, tuple)):
                for v in obj:
                    visit(v)

        for v in vars(self).values():
            visit(v)
        return found

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}


class Linear(Module):
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, bias_init: float = 0.0, square_orthogonal: bool = False):
        if square_orthogonal and n_in == n_out:
            w = orthogonal(rng, n_in)
        else:
            w = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.weight = Parameter(f"{name}.w", w)
        self.bias = Parameter(f"{name}.b", constant(n_out, bias_init)) if bias else None

    def __call__(self, x: Value) -> Value:
        y = ops.matmul(x, self.weight)
        return ops.add_bias(y, self.bias) if self.bias is not None else y


class Conv3x3(Module):
    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        self.kernels = Parameter(f"{name}.k", glorot_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9))
        self.bias = Parameter(f"{name}.b", constant(c_out))

    def __call__(self, x: Value) -> Value:
        return ops.conv2d(x, self.kernels, self.bias)


class LSTMCell(Module):
    def __init__(self, name: str, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_x = Parameter(f"{name}.wx", glorot_uniform(rng, (n_in, 4 * hidden), n_in, hidden))
        self.w_h = Parameter(f"{name}.wh", np.concatenate([orthogonal(rng, hidden) for _ in range(4)], axis=1))
        b = constant(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.bias = Parameter(f"{name}.b", b)

    def __call__(self, x: Value, h: Value, c: Value) -> tuple[Value, Value]:
        z = ops.add_bias(ops.add(ops.matmul(x, self.w_x), ops.matmul(h, self.w_h)), self.bias)
        n = self.hidden
        i = ops.sigmoid(ops.slice_axis(z, -1, 0, n))
        f = ops.sigmoid(ops.slice_axis(z, -1, n, 2 * n))
        o = ops.sigmoid(ops.slice_axis(z, -1, 2 * n, 3 * n))
        u = ops.tanh(ops.slice_axis(z, -1, 3 * n, 4 * n))
        c_new = ops.add(ops.mul(f, c), ops.mul(i, u))
        h_new = ops.mul(o, ops.tanh(c_new))
        return h_new, c_new
