"""Weight initialisers."""

import numpy as np

from .core import default_dtype


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(default_dtype())


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q *= np.sign(np.diag(r))
    return q.astype(default_dtype())


def constant(shape, value: float = 0.0) -> np.ndarray:
    return np.full(shape, value, dtype=default_dtype())
