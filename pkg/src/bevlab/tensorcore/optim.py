"""Adam optimizer over named parameters."""
from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .tensor import Parameter


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        """Apply one update; frozen parameters are skipped entirely."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = grads.get(p.name)
            if g is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            # in place so tensors referenced elsewhere see the update
            p.data[...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sgd_adam_step(params: Iterable[Parameter], grads: Mapping[str, np.ndarray], lr: float,
                  state: Adam | None = None) -> Adam:
    """Functional form: create the optimizer state on first use, then step."""
    if state is None:
        state = Adam(params, lr=lr)
    state.lr = lr
    state.step(grads)
    return state
