"""Finite-difference suite over every differentiable op and the composed map step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Value, ops, precision
from .autodiff.gradcheck import check_gradients
from .memory import MapState, NeuralMap, NeuralMapConfig, map_step

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    max_error: float
    worst_input: str
    worst_index: int

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _v(rng, *shape, low=None):
    a = rng.standard_normal(shape)
    if low is not None:  # keep away from kinks
        a = np.sign(a) * (np.abs(a) + low)
    return Value(a)


def _projected(out_fn, rng):
    """Scalar loss sum(R * out) with a fixed random R."""
    holder = {}

    def loss():
        out = out_fn()
        if "r" not in holder:
            holder["r"] = Value(rng.standard_normal(out.shape))
        return ops.sum(ops.mul(out, holder["r"]))

    return loss


def _op_cases() -> dict[str, Callable]:
    cases = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn
        return deco

    @case("matmul")
    def _(rng):
        a, b = _v(rng, 4, 3), _v(rng, 3, 2)
        return _projected(lambda: ops.matmul(a, b), rng), {"a": a, "b": b}

    @case("matmul_vector")
    def _(rng):
        a, b = _v(rng, 3), _v(rng, 3, 5)
        return _projected(lambda: ops.matmul(a, b), rng), {"a": a, "b": b}

    @case("conv2d")
    def _(rng):
        x, k, b = _v(rng, 2, 5, 5), _v(rng, 3, 2, 3, 3), _v(rng, 3)
        return _projected(lambda: ops.conv2d(x, k, b), rng), {"input": x, "kernels": k, "bias": b}

    @case("conv2d_batched")
    def _(rng):
        x, k, b = _v(rng, 2, 2, 4, 4), _v(rng, 3, 2, 3, 3), _v(rng, 3)
        return _projected(lambda: ops.conv2d(x, k, b), rng), {"input": x, "kernels": k, "bias": b}

    for kind in ("sigmoid", "tanh", "relu", "exp"):
        def make(kind=kind):
            def build(rng):
                x = _v(rng, 32, low=0.05)
                fn = getattr(ops, kind)
                return _projected(lambda: fn(x), rng), {"x": x}
            return build
        cases[kind] = make()

    for kind in ("add", "sub", "mul"):
        def make(kind=kind):
            def build(rng):
                a, b = _v(rng, 3, 4), _v(rng, 3, 4)
                return _projected(lambda: ops.pointwise(kind, a, b), rng), {"a": a, "b": b}
            return build
        cases[kind] = make()

    @case("scale")
    def _(rng):
        x = _v(rng, 6)
        return _projected(lambda: ops.scale(x, -2.5), rng), {"x": x}

    @case("shift")
    def _(rng):
        x, c = _v(rng, 2, 3), rng.standard_normal((2, 3))
        return _projected(lambda: ops.shift(x, c), rng), {"x": x}

    @case("mask")
    def _(rng):
        x, m = _v(rng, 3, 4), rng.integers(0, 2, size=(3, 1))
        return _projected(lambda: ops.mask(x, m), rng), {"x": x}

    @case("add_bias")
    def _(rng):
        x, b = _v(rng, 3, 4), _v(rng, 4)
        return _projected(lambda: ops.add_bias(x, b), rng), {"x": x, "bias": b}

    @case("concat")
    def _(rng):
        a, b, c = _v(rng, 2, 3), _v(rng, 2, 1), _v(rng, 2, 4)
        return _projected(lambda: ops.concat([a, b, c], axis=1), rng), {"a": a, "b": b, "c": c}

    @case("stack")
    def _(rng):
        a, b = _v(rng, 3), _v(rng, 3)
        return _projected(lambda: ops.stack([a, b]), rng), {"a": a, "b": b}

    @case("slice_axis")
    def _(rng):
        x = _v(rng, 4, 5)
        return _projected(lambda: ops.slice_axis(x, 1, 1, 4), rng), {"x": x}

    @case("reshape")
    def _(rng):
        x = _v(rng, 2, 6)
        return _projected(lambda: ops.reshape(x, (3, 4)), rng), {"x": x}

    @case("sum_axis")
    def _(rng):
        x = _v(rng, 3, 4)
        return _projected(lambda: ops.sum(x, axis=-1), rng), {"x": x}

    @case("mean")
    def _(rng):
        x = _v(rng, 3, 4)
        return (lambda: ops.scale(ops.mean(ops.mul(x, x)), 3.0)), {"x": x}

    @case("pick")
    def _(rng):
        x, idx = _v(rng, 4, 3), rng.integers(0, 3, size=4)
        return _projected(lambda: ops.pick(x, idx), rng), {"x": x}

    @case("softmax")
    def _(rng):
        x = _v(rng, 2, 5)
        return _projected(lambda: ops.softmax(x), rng), {"x": x}

    @case("log_softmax")
    def _(rng):
        x = _v(rng, 2, 5)
        return _projected(lambda: ops.log_softmax(x), rng), {"x": x}

    @case("softmax_positions")
    def _(rng):
        x = _v(rng, 9, 9)
        return _projected(lambda: ops.softmax_positions(x), rng), {"scores": x}

    @case("scatter_write")
    def _(rng):
        m, v = _v(rng, 3, 4, 5), _v(rng, 3)
        return _projected(lambda: ops.scatter_write(m, (2, 1), v), rng), {"map": m, "vec": v}

    @case("scatter_write_batched")
    def _(rng):
        m, v = _v(rng, 2, 3, 4, 4), _v(rng, 2, 3)
        pos = np.array([[0, 3], [2, 1]])
        return _projected(lambda: ops.scatter_write(m, pos, v), rng), {"map": m, "vec": v}

    @case("gather_column")
    def _(rng):
        m = _v(rng, 3, 4, 5)
        return _projected(lambda: ops.gather_column(m, (4, 3)), rng), {"map": m}

    @case("shift2d")
    def _(rng):
        m = _v(rng, 2, 4, 4)
        return _projected(lambda: ops.shift2d(m, (2, 1)), rng), {"map": m}

    @case("shift2d_batched")
    def _(rng):
        m = _v(rng, 2, 2, 4, 4)
        return _projected(lambda: ops.shift2d(m, np.array([[-1, 2], [1, 0]])), rng), {"map": m}

    @case("crop")
    def _(rng):
        m = _v(rng, 2, 5, 5)
        return _projected(lambda: ops.crop(m, (4, 1), 3), rng), {"map": m}

    @case("weighted_sum")
    def _(rng):
        m = _v(rng, 3, 5, 5)
        w = rng.random((5, 5))
        w = Value(w / w.sum())
        return _projected(lambda: ops.weighted_sum(m, w), rng), {"map": m, "weights": w}

    @case("channel_dot")
    def _(rng):
        m, q = _v(rng, 3, 4, 5), _v(rng, 3)
        return _projected(lambda: ops.channel_dot(m, q), rng), {"map": m, "query": q}

    return cases


def _map_step_case(write: str, context: str, addressing: str, read: str = "global"):
    def build(rng):
        config = NeuralMapConfig(channels=4, height=5, width=5, context=context, write=write,
                                 addressing=addressing, read=read, crop=3, hidden=8, conv_channels=2)
        params = NeuralMap(config, rng)
        for p in params.parameters():  # non-zero biases exercise every path
            p.data[...] = p.data + 0.1 * rng.standard_normal(p.shape)
        m0 = Value(rng.standard_normal((config.channels, config.height, config.width)))
        s = Value(rng.standard_normal(config.channels))
        where = (3, 1) if addressing == "absolute" else (1, -1)
        r_o = Value(rng.standard_normal(config.output_dim))
        r_m = Value(rng.standard_normal(m0.shape))

        def loss():
            out = map_step(MapState(m0), s, where, config, params)
            return ops.add(ops.sum(ops.mul(out.o, r_o)), ops.sum(ops.mul(out.new_map.memory, r_m)))

        inputs = {"map": m0, "s": s}
        inputs.update({p.name: p for p in params.parameters()})
        return loss, inputs
    return build


def registry() -> dict[str, Callable]:
    cases = _op_cases()
    for write in ("hard", "gru"):
        for context in ("plain", "key-value"):
            for addressing in ("absolute", "egocentric"):
                cases[f"map_step[{write},{context},{addressing}]"] = _map_step_case(write, context, addressing)
    cases["map_step[gru,plain,absolute,crop]"] = _map_step_case("gru", "plain", "absolute", "crop")
    return cases


def run_case(name: str, build: Callable, seed: int) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    with precision(np.float64):
        loss, inputs = build(rng)
        results = check_gradients(loss, list(inputs.values()))
    worst = max(range(len(results)), key=lambda i: results[i][0])
    return CaseResult(name, results[worst][0], list(inputs)[worst], results[worst][1])


def run_suite(seed: int = 0, cases: dict | None = None) -> list[CaseResult]:
    cases = registry() if cases is None else cases
    return [run_case(name, build, seed) for name, build in cases.items()]


def format_table(results: list[CaseResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  status  worst"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.max_error:>12.3e}  {status:<6}  {r.worst_input}[{r.worst_index}]")
    return "\n".join(lines)
