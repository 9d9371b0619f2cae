"""Adam with bias correction."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor

ADAM_EPS = 1e-8


class Adam:
    """Adam over a named set of parameter tensors.

    ``lr`` is a plain attribute so a scheduler can change it between steps.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = ADAM_EPS):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, g in grads.items():
            p = self.params[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: Mapping[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(tensors[f"adam.v.{k}"], dtype=self.params[k].dtype)
        self.step_count = int(step_count)
