"""Losses and optimizers composed from the autograd primitives."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    # the max shift is a constant; its gradient contributions cancel
    shift = z.data.max(axis=axis, keepdims=True)
    zs = ag.sub(z, shift)
    lse = ag.log(ag.sum_(ag.exp(zs), axis=axis, keepdims=True))
    return ag.sub(zs, lse)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = ag.gather(logp, (np.arange(labels.size), labels))
    return ag.scale(ag.mean(picked), -1.0)


def squared_error(pred: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of the squared Euclidean distance along the last axis."""
    diff = ag.sub(pred, target)
    return ag.mean(ag.sum_(ag.mul(diff, diff), axis=-1))


class SGD:
    """Fixed-step stochastic gradient descent (optional heavy-ball momentum)."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._vel = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            g = grads[name]
            if self.momentum:
                v = self._vel[name]
                v *= self.momentum
                v += g
                g = v
            p.data = p.data - self.lr * g


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self._m[name], self._v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
    if kind == "sgd":
        return SGD(params, lr, momentum)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
