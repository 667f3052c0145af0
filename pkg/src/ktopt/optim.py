"""Adam-style adaptive gradient descent over named parameter arrays."""

from __future__ import annotations

import numpy as np

__all__ = ["Adam", "TrainingDivergedError"]


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class Adam:
    """First/second-moment adaptive updates, applied in place.

    Parameters live in a dict of float64 arrays; ``step`` takes a dict of
    gradients covering any subset of them.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            mhat = m / b1t
            vhat = v / b2t
            self.params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
