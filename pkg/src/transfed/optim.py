"""Adam optimizer with bias correction and decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .layers import ShapeError
from .params import ParameterSet


class Adam:
    """Adam state plus hyper-parameters; single-owner, not thread-safe.

    The update per step t is the bias-corrected Adam delta followed by
    decoupled decay:

        m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
        p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
        p -= lr * weight_decay * p

    Defaults follow the training recipe used throughout this package:
    lr 0.01, weight decay 0.001.
    """

    def __init__(self, lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.001):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, np.ndarray] | None = None
        self._v: dict[str, np.ndarray] | None = None

    def _init_state(self, params: ParameterSet) -> None:
        self._m = {name: np.zeros_like(t) for name, t in params}
        self._v = {name: np.zeros_like(t) for name, t in params}

    def step(self, params: ParameterSet, grads: ParameterSet) -> None:
        """Apply one update in place on the tensors of ``params``."""
        if self._m is None:
            self._init_state(params)
        if grads.names != params.names:
            raise ShapeError("gradient names do not match parameter names")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params:
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} shape {p.shape}"
                )
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p


def adam_step(params: ParameterSet, grads: ParameterSet, state: Adam) -> ParameterSet:
    """Functional spelling of one optimizer step; mutates and returns params."""
    state.step(params, grads)
    return params
