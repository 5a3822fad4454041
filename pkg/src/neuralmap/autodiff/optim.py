from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import NumericError, Parameter


class RMSProp:
    """RMSProp with a squared-gradient moving average and global norm clipping.

    The epsilon sits inside the square root, as in the A3C reference setup.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 7e-4, decay: float = 0.99,
                 eps: float = 1e-5, clip_norm: float | None = 40.0):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.clip_norm = clip_norm
        self.square_avg = {p.name: np.zeros_like(p.data) for p in self.params}
        self.steps = 0

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for p in self.params)))

    def step(self) -> float:
        """Apply one update, zero all gradients and return the pre-clip gradient norm."""
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / (norm + 1e-12)
        for p in self.params:
            g = p.grad * p.data.dtype.type(factor)
            sq = self.square_avg[p.name]
            sq *= self.decay
            sq += (1.0 - self.decay) * g * g
            p.data -= (self.lr * g / np.sqrt(sq + self.eps)).astype(p.data.dtype)
            p.zero_grad()
        self.steps += 1
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict:
        return {f"rmsprop/{k}": v for k, v in self.square_avg.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for name in self.square_avg:
            key = f"rmsprop/{name}"
            if key in arrays:
                self.square_avg[name] = np.array(arrays[key], dtype=self.square_avg[name].dtype)
