from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from vbcls.autodiff.tensor import Tensor
from vbcls.errors import ConfigurationError, StateError


@dataclass
class OptimizerState:
    """Momentum buffers plus the hyperparameters of SGD.

    ``multipliers`` maps a parameter name to its learning-rate factor;
    names without an entry use 1.
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    multipliers: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight decay must be nonnegative, got {self.weight_decay}")


def init_state(params: Mapping[str, Tensor], lr: float, momentum: float = 0.9,
               weight_decay: float = 0.0, multipliers: Mapping[str, float] | None = None) -> OptimizerState:
    state = OptimizerState(lr=lr, momentum=momentum, weight_decay=weight_decay,
                           multipliers=dict(multipliers or {}))
    state.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
    return state


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None,
             state: OptimizerState) -> None:
    """One in-place update: ``v = m*v + g + wd*theta``, ``theta -= lr*mult*v``.

    With ``grads=None`` each parameter's ``.grad`` is used (zero if unset).
    """
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None or v.shape != p.data.shape:
            raise StateError(f"optimizer state has no velocity matching parameter {name!r}")
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = 0.0
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data -= state.lr * state.multipliers.get(name, 1.0) * v
