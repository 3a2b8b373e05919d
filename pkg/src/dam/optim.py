"""SGD with classic momentum: ``v <- mu*v + g; p <- p - lr*v``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


class SGD:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, momentum: float = 0.9, names=None):
        self.params = list(params)
        self.names = list(names) if names is not None else [f"param{i}" for i in range(len(self.params))]
        self.state = OptimizerState(lr, momentum, [np.zeros_like(p.data) for p in self.params])

    def step(self) -> None:
        sgd_step(self.params, self.state, self.names)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: list[Tensor], state: OptimizerState, names=None) -> None:
    if len(state.velocity) != len(params):
        raise ValueError(f"{len(state.velocity)} velocity buffers for {len(params)} parameters")
    for i, p in enumerate(params):
        if p.grad is None:
            name = names[i] if names else f"param{i}"
            raise ValueError(f"sgd_step: {name} has no gradient")
    mu = state.momentum
    lr = state.learning_rate
    for p, v in zip(params, state.velocity):
        v *= mu
        v += p.grad
        p.data -= lr * v
