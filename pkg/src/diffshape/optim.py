"""Adam optimiser over a dict of named numpy parameter arrays.

Deterministic: no internal randomness, update order follows the dict's
insertion order, and the learning rate is a plain mutable attribute so
callers can apply schedules.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        """Apply one update using ``grads`` (same keys as the params)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for key, g in grads.items():
            m = self._m[key] = b1 * self._m[key] + (1.0 - b1) * g
            v = self._v[key] = b2 * self._v[key] + (1.0 - b2) * (g * g)
            mhat = m / bias1
            vhat = v / bias2
            self.params[key] = self.params[key] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
