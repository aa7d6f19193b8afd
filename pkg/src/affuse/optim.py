"""Nesterov SGD and AdaGrad with epoch-level learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from .autodiff import Parameter
from .tensor import ConfigError

__all__ = ["Schedule", "Optimizer", "OPTIMIZERS", "SCHEDULES"]

OPTIMIZERS = ("nesterov_sgd", "adagrad")
SCHEDULES = ("step", "poly", "cosine", "constant")


@dataclass
class Schedule:
    """Multiplier on the base learning rate as a function of the epoch index.

    >>> s = Schedule("step", milestones=(300, 350), gamma=0.1)
    >>> [round(0.2 * s.factor(e), 6) for e in (299, 300, 350)]
    [0.2, 0.02, 0.002]
    """

    kind: str = "constant"
    milestones: Tuple[int, ...] = ()
    gamma: float = 0.1
    power: float = 0.9
    total_epochs: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.kind!r}")

    def factor(self, epoch: int) -> float:
        if self.kind == "step":
            return self.gamma ** sum(1 for m in self.milestones if epoch >= m)
        if self.kind == "poly":
            return max(0.0, 1.0 - epoch / self.total_epochs) ** self.power
        if self.kind == "cosine":
            return 0.5 * (1.0 + math.cos(math.pi * min(epoch, self.total_epochs) / self.total_epochs))
        return 1.0


class Optimizer:
    """Updates parameters in place from their accumulated ``grad``.

    Nesterov SGD::

        v <- m*v + g + wd*p
        p <- p - lr*(g + wd*p + m*v)

    AdaGrad::

        a <- a + g^2
        p <- p - lr*g / (sqrt(a) + 1e-7)

    Parameters flagged ``decay=False`` (BN affine terms, biases) skip weight decay.
    """

    def __init__(self, params: Sequence[Parameter], kind: str = "nesterov_sgd", lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 0.0, schedule: Schedule = None):
        if kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {kind!r}")
        # lr == 0 stays legal: it is the no-op training run used for checks
        if not lr >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = [p for p in params if p.trainable]
        self.kind = kind
        self.base_lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule or Schedule()
        self.lr = lr
        self.state: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.value) for p in self.params}

    def set_epoch(self, epoch: int) -> float:
        self.lr = self.base_lr * self.schedule.factor(epoch)
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.value
            acc = self.state[id(p)]
            if self.kind == "nesterov_sgd":
                acc *= self.momentum
                acc += g
                update = g + self.momentum * acc
            else:
                acc += g * g
                update = g / (np.sqrt(acc) + 1e-7)
            if self.lr != 0:
                p.value -= (self.lr * update).astype(p.value.dtype, copy=False)
