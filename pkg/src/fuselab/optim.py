"""AdamW with decoupled weight decay over named parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter
from .errors import StateError


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class AdamW:
    """Standard AdamW update; frozen parameters are never touched."""

    def __init__(self, params: list[Parameter], config: AdamWConfig | None = None):
        self.config = config or AdamWConfig()
        self.params = list(params)
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.tensor.grad
            if g is None:
                raise StateError(f"optimizer step with no gradient on '{p.name}'")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += cfg.eps
            update = np.divide(m, denom, out=denom)
            update /= bc1
            if cfg.weight_decay:
                update += cfg.weight_decay * p.tensor.data
            update *= cfg.lr
            p.tensor.data -= update
