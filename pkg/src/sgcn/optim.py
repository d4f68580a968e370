"""SGD with Nesterov momentum and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight decay must be nonnegative, got {self.weight_decay}")


def sgd_nesterov_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState):
    """One Nesterov step on raw arrays; returns the new parameter arrays.

    ``g' = g + wd*w``, ``v <- m*v + g'``, ``w <- w - lr*(g' + m*v)``.
    Velocity buffers are created (zeroed) on first use.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params):
        raise DimensionError("optimizer state tracks a different parameter list")
    lr, m, wd = state.learning_rate, state.momentum, state.weight_decay
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        v = state.velocity[i]
        if w.shape != g.shape or w.shape != v.shape:
            raise DimensionError(f"shape mismatch: param {w.shape}, grad {g.shape}, velocity {v.shape}")
        g = g + wd * w if wd else g
        v = m * v + g
        state.velocity[i] = v
        out.append(w - lr * (g + m * v))
    return out


class SGD:
    """Stateful wrapper applying :func:`sgd_nesterov_step` to tensors."""

    def __init__(self, params: Sequence[Tensor], lr=0.1, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.state = OptimizerState(lr, momentum, weight_decay, [np.zeros_like(p.data) for p in self.params])

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = float(value)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = sgd_nesterov_step([p.data for p in self.params], grads, self.state)
        for p, w in zip(self.params, new):
            p.data = w

    def velocity_dict(self, names: Sequence[str]) -> Dict[str, np.ndarray]:
        return dict(zip(names, self.state.velocity))


def step_lr(epoch: int, base_lr: float = 0.1, milestones=(30, 45), gamma: float = 0.1) -> float:
    """Learning rate for 1-based ``epoch``: divided by 10 after each milestone epoch."""
    drops = np.sum(epoch > np.asarray(milestones, dtype=int)) if len(milestones) else 0
    return base_lr * gamma ** int(drops)


def validate_schedule(milestones, epochs):
    ms = list(milestones)
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigurationError(f"milestones must be strictly increasing, got {ms}")
    if ms and (ms[0] < 1 or ms[-1] >= epochs):
        raise ConfigurationError(f"milestones {ms} must lie in [1, {epochs})")
