from __future__ import annotations

import numpy as np

from .params import ParamSet


class Adam:
    """Adam with bias correction; moment buffers start at zero."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = params.grads()
        for name in params.names():
            if not np.all(np.isfinite(grads[name])):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        adam_step(params, grads, self.m, self.v, self.lr, self.beta1, self.beta2, self.eps, self.t)


def adam_step(params: ParamSet, grads, m, v, lr, beta1, beta2, eps, t) -> ParamSet:
    """One in-place Adam update at step ``t`` (1-based). Returns ``params``."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in m:
            m[name] = np.zeros_like(p.data)
            v[name] = np.zeros_like(p.data)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
    return params
