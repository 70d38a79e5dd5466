"""Adam with decoupled weight decay, operating on flat parameter buffers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    amsgrad: bool = True


class AdamW:
    """Minimizer. Callers doing ascent pass the negated gradient.

    A `trainable` mask gates both the parameter write and the decay, so
    frozen segments are never touched. lr == 0 skips the write entirely,
    keeping parameters bitwise identical.
    """

    def __init__(self, size: int, cfg: AdamConfig):
        self.cfg = cfg
        self.t = 0
        self.m = np.zeros(size, dtype=np.float64)
        self.v = np.zeros(size, dtype=np.float64)
        self.vmax = np.zeros(size, dtype=np.float64) if cfg.amsgrad else None

    def step(self, flat: np.ndarray, grad: np.ndarray, trainable=None) -> None:
        c = self.cfg
        if grad.shape != flat.shape:
            raise ValueError("gradient shape does not match parameters")
        self.t += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad
        if c.amsgrad:
            np.maximum(self.vmax, self.v, out=self.vmax)
            vref = self.vmax
        else:
            vref = self.v
        if c.lr == 0.0:
            return
        mhat = self.m / (1.0 - c.beta1**self.t)
        vhat = vref / (1.0 - c.beta2**self.t)
        update = c.lr * (mhat / (np.sqrt(vhat) + c.eps) + c.weight_decay * flat)
        if trainable is None:
            flat -= update
        else:
            flat[trainable] -= update[trainable]
