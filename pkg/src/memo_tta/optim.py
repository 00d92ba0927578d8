"""Update rules: plain/momentum SGD and Adam, both with decoupled weight decay."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class UpdateRule:
    """Base class. ``step`` returns False (and leaves parameters alone) on non-finite grads."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            return None
        return grads

    def step(self) -> bool:
        grads = self._grads()
        if grads is None:
            return False
        if self.weight_decay:
            shrink = 1.0 - self.lr * self.weight_decay
            for p in self.params:
                p.data *= shrink
        self._apply(grads)
        return True

    def _apply(self, grads) -> None:
        raise NotImplementedError


class SGD(UpdateRule):
    def __init__(self, params, lr, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = float(momentum)
        self.velocity = [None] * len(self.params)

    def _apply(self, grads):
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.momentum:
                v = self.velocity[i]
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[i] = v
                g = v
            p.data -= (self.lr * g).astype(p.data.dtype, copy=False)


class AdamW(UpdateRule):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _apply(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)


def make_update_rule(name: str, params, lr: float, momentum: float = 0.9,
                     weight_decay: float = 0.0) -> UpdateRule:
    """Build an update rule by config name: ``sgd``, ``sgd_momentum`` or ``adaptive_moments``."""
    if name == "sgd":
        return SGD(params, lr, momentum=0.0, weight_decay=weight_decay)
    if name == "sgd_momentum":
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    if name in ("adaptive_moments", "adamw"):
        return AdamW(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown update rule {name!r}")
