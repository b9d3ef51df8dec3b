"""Base optimizers, the learning-rate schedule and the SAM wrapper.

Optimizers update a flat parameter vector in place, restricted to a boolean
``scope`` mask, so the task optimizer and the discriminator optimizer can
share one vector without touching each other's entries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_finite(grads):
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient passed to optimizer")


@dataclass(frozen=True)
class ScheduleConfig:
    lr0: float = 0.01
    a: float = 10.0
    b: float = 0.75


def lr_at(schedule: ScheduleConfig, p: float) -> float:
    """lr0 * (1 + a p) ** -b for training progress p in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return schedule.lr0 * (1.0 + schedule.a * p) ** (-schedule.b)


class SGD:
    """Heavy-ball SGD; weight decay is added to the gradient before the velocity update."""

    def __init__(self, scope: np.ndarray, momentum: float = 0.9, weight_decay: float = 1e-3):
        self.scope = np.asarray(scope, dtype=bool)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = np.zeros(int(self.scope.sum()))

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> None:
        _check_finite(grads)
        w = params[self.scope]
        g = grads[self.scope] + self.weight_decay * w
        self.velocity = self.momentum * self.velocity + g
        params[self.scope] = w - lr * self.velocity

    def state_dict(self) -> dict:
        return {"kind": "sgd", "velocity": self.velocity.tolist()}

    def load_state_dict(self, state: dict) -> None:
        v = np.asarray(state["velocity"], dtype=np.float64)
        if v.shape != self.velocity.shape:
            raise ValueError("velocity shape does not match optimizer scope")
        self.velocity = v


class Adam:
    def __init__(
        self,
        scope: np.ndarray,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.scope = np.asarray(scope, dtype=bool)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        n = int(self.scope.sum())
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> None:
        _check_finite(grads)
        w = params[self.scope]
        g = grads[self.scope] + self.weight_decay * w
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params[self.scope] = w - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    def load_state_dict(self, state: dict) -> None:
        self.m = np.asarray(state["m"], dtype=np.float64)
        self.v = np.asarray(state["v"], dtype=np.float64)
        self.t = int(state["t"])


def make_optimizer(kind: str, scope, momentum=0.9, weight_decay=1e-3):
    if kind == "sgd":
        return SGD(scope, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(scope, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


class SAMStateError(RuntimeError):
    pass


class SAM:
    """Two-step sharpness-aware wrapper around a base optimizer.

    ``first_step`` moves the scoped weights to ``w + rho * g / ||g||`` (one
    global norm over the whole scope) and zeroes the caller's gradient buffer.
    The caller then recomputes gradients at the perturbed point and calls
    ``second_step``, which restores ``w`` exactly and lets the base optimizer step
    with those gradients.
    """

    def __init__(self, base, rho: float):
        if rho < 0:
            raise ValueError("rho must be non-negative")
        self.base = base
        self.rho = float(rho)
        self.scope = base.scope
        self.eps_hat = np.zeros(int(self.scope.sum()))
        self._origin = None
        self.applied = False

    def first_step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.applied:
            raise SAMStateError("first_step called twice without second_step")
        _check_finite(grads)
        g = grads[self.scope]
        norm = float(np.sqrt(np.dot(g, g)))
        if norm > 0.0 and self.rho > 0.0:
            self.eps_hat = g * (self.rho / norm)
        else:
            self.eps_hat = np.zeros_like(g)
        self._origin = params[self.scope].copy()
        params[self.scope] = self._origin + self.eps_hat
        grads[...] = 0.0
        self.applied = True
        return self.eps_hat

    def second_step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> None:
        if not self.applied:
            raise SAMStateError("second_step called without a preceding first_step")
        # restore from the saved copy: (w + e) - e is not always w in floating point
        params[self.scope] = self._origin
        self._origin = None
        self.applied = False
        self.base.step(params, grads, lr)

    def state_dict(self) -> dict:
        if self.applied:
            raise SAMStateError("cannot snapshot while the perturbation is applied")
        return {"rho": self.rho, "base": self.base.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.rho = float(state["rho"])
        self.base.load_state_dict(state["base"])
