"""SGD with Nesterov momentum (no dampening) and decoupled-from-attention weight decay."""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np


def nesterov_update(param, grad, velocity, lr, momentum=0.9, weight_decay=0.0):
    """One update; returns ``(new_param, new_velocity)``.

    >>> nesterov_update(1.0, 1.0, 0.0, lr=0.1, momentum=0.9)
    (0.81, 1.0)
    """
    g = grad + weight_decay * param if weight_decay else grad
    v = momentum * velocity + g
    return param - lr * (g + momentum * v), v


class NesterovSGD:
    """Optimizer state (velocities keyed by parameter) for a :class:`~tkn.network.Model`.

    Weight decay reaches only the arrays a layer lists in ``decay`` (conv
    kernels and dense weights); biases and window parameters never decay.
    After every step, layers with window parameters are re-clipped and
    their rois recomputed.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, model, lr: float) -> None:
        mu = self.momentum
        for key, layer, name, arr in model.parameters():
            g = layer.grads[name]
            if name in layer.decay and self.weight_decay:
                g = g + self.weight_decay * arr
            v = self.velocity.get(key)
            if v is None:
                v = self.velocity[key] = np.zeros_like(arr)
            v *= mu
            v += g
            arr -= (lr * (g + mu * v)).astype(arr.dtype, copy=False)
        model.refresh()


def sgd_nesterov_step(model, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4,
                      optimizer: NesterovSGD | None = None):
    """Functional entry point; pass the same ``optimizer`` across steps to keep velocity."""
    if optimizer is None:
        optimizer = NesterovSGD(momentum, weight_decay)
    optimizer.step(model, lr)
    return model


def step_lr(epoch: int, base_lr: float, milestones: Sequence[int], factor: float = 10.0) -> float:
    """Piecewise-constant schedule: divide by ``factor`` at each milestone epoch."""
    return base_lr / factor ** sum(epoch >= m for m in milestones)
