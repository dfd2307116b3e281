"""Optimizers over named parameter dicts.

Plain SGD is the update rule for both personalization stages; Adam exists
only for backbone pretraining where convergence speed matters and nothing
downstream depends on the update being a pure scaled gradient.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument, NumericalFailure


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    """theta <- theta - lr * grad, returned as a new dict; inputs untouched."""
    if lr < 0:
        raise InvalidArgument("learning rate must be nonnegative")
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if np.shape(g) != np.shape(p):
            raise InvalidArgument(f"gradient shape {np.shape(g)} does not match "
                                  f"parameter {name!r} shape {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient for {name!r}")
        out[name] = p - lr * np.asarray(g, dtype=np.float64)
    return out


class Adam:
    """Standard Adam with bias correction, state keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            out[name] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out
