"""Adaptive-moment gradient ascent for positive hyperparameters.

Steps are taken in log-parameter space so positivity is automatic; gradients
supplied with respect to the raw parameters are converted by the chain rule.
"""

from __future__ import annotations

import numpy as np

__all__ = ["AdamOptimizer"]


class AdamOptimizer:
    """Adam with the usual defaults, ascending an objective.

    ``ascend`` takes and returns plain ``{name: value}`` dicts; first and
    second moment estimates are kept per name across calls.
    """

    def __init__(self, lr: float = 1e-2, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not 0 < lr:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, float] = {}
        self._v: dict[str, float] = {}

    def ascend(self, params: dict, grads: dict) -> dict:
        """One ascent step on log(params); keys missing from grads are frozen."""
        self.t += 1
        out = dict(params)
        for name, grad in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            # d/d log p = p * d/d p
            g = float(grad) * params[name]
            m = self._m.get(name, 0.0)
            v = self._v.get(name, 0.0)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            out[name] = params[name] * np.exp(
                self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out
