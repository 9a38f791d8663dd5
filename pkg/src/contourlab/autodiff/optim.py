"""Adam optimization and plateau-based learning-rate scheduling."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .tensor import Parameter


class Adam:
    """Adam with bias correction (Kingma-Ba algorithm 1).

    Keeps first/second moment estimates per parameter and one shared step
    counter. ``lr`` may be reassigned between steps; the schedule below
    does exactly that.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ValueError(f"parameter {p.name} has no gradient; run backward first")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {p.name: m.copy() for p, m in zip(self.params, self._m)},
            "v": {p.name: v.copy() for p, v in zip(self.params, self._v)},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        for i, p in enumerate(self.params):
            for store, key in ((self._m, "m"), (self._v, "v")):
                arr = np.asarray(state[key][p.name], dtype=p.data.dtype)
                if arr.shape != p.data.shape:
                    raise ValueError(f"optimizer state for {p.name} has shape {arr.shape}")
                store[i] = arr.copy()


@dataclass(frozen=True)
class PlateauSchedule:
    """Step-decay learning rate driven by a minimized epoch metric.

    The first observed metric establishes the baseline and counts toward
    patience; only a strict improvement on the best seen so far resets
    the counter. After ``patience`` consecutive epochs without
    improvement the rate is multiplied by ``decay_factor`` (clamped at
    ``floor_lr``) and the counter restarts.
    """

    current_lr: float = 1e-4
    floor_lr: float = 1e-7
    decay_factor: float = 0.1
    patience: int = 5
    best_metric: float = math.nan  # nan means no baseline yet
    epochs_since_improvement: int = 0


def plateau_update(schedule: PlateauSchedule, epoch_metric: float) -> PlateauSchedule:
    """Advance the schedule by one epoch; returns a new schedule."""
    metric = float(epoch_metric)
    improved = metric < schedule.best_metric  # False when baseline is nan
    best = metric if (math.isnan(schedule.best_metric) or improved) else schedule.best_metric
    if improved:
        return replace(schedule, best_metric=best, epochs_since_improvement=0)
    count = schedule.epochs_since_improvement + 1
    if count >= schedule.patience:
        decayed = max(schedule.current_lr * schedule.decay_factor, schedule.floor_lr)
        return replace(schedule, best_metric=best, current_lr=decayed,
                       epochs_since_improvement=0)
    return replace(schedule, best_metric=best, epochs_since_improvement=count)
