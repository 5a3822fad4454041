"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Value, backward, no_grad

# gradients smaller than this are compared in absolute terms
ABS_FLOOR = 1e-6


def numeric_gradient(loss: Callable[[], Value], v: Value, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(v.data)
    flat, gflat = v.data.reshape(-1), g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss().data)
            flat[i] = orig - h
            fm = float(loss().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, int]:
    """Worst elementwise relative error and its flat index."""
    a, n = analytic.reshape(-1), numeric.reshape(-1)
    if a.size == 0:
        return 0.0, -1
    err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)
    i = int(np.argmax(err))
    return float(err[i]), i


def check_gradients(loss: Callable[[], Value], inputs: Sequence[Value], h: float = 1e-5) -> list[tuple[float, int]]:
    """Compare reverse-mode gradients of ``loss`` w.r.t. ``inputs`` to finite differences.

    ``loss`` must rebuild the graph from the current input arrays on every call.
    """
    for v in inputs:
        v.requires_grad = True
        v.zero_grad()
    backward(loss())
    analytic = [v.grad.copy() for v in inputs]
    return [relative_error(a, numeric_gradient(loss, v, h)) for a, v in zip(analytic, inputs)]
