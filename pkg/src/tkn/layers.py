"""Stateful layer wrappers around the kernels in :mod:`tkn.tensor`.

Every layer keeps the cache of its last forward pass and fills ``grads``
on backward. ``params`` maps names to the live arrays the optimizer updates
in place; ``decay`` names the ones that receive weight decay.
"""
from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ShapeError
from .target import ARLayer, TargetLayer

__all__ = ["Conv2D", "TargetLayer", "ARLayer", "MaxPool2", "Flatten", "Dense", "ReLU", "Dropout"]


class _Stateless:
    decay: Tuple[str, ...] = ()
    params: Dict[str, np.ndarray] = {}

    def __init__(self):
        self.grads: Dict[str, np.ndarray] = {}

    def output_shape(self, shape):
        return shape

    def flops(self, shape=None) -> Tuple[int, int]:
        return 0, 0

    def penalty(self) -> float:
        return 0.0


class Conv2D:
    kind = "conv"
    decay = ("kernels",)

    def __init__(self, c_in, c_out, k, input_hw, dtype=np.float32):
        if k % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {k}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.h, self.w = input_hw
        self.kernels = np.zeros((c_out, c_in, k, k), dtype=dtype)
        self.grads: Dict[str, np.ndarray] = {}

    @property
    def params(self):
        return {"kernels": self.kernels}

    def forward(self, x, train=False):
        self._x = x
        if train:
            out, self._cols = T.conv2d(x, self.kernels, return_cols=True)
        else:
            out, self._cols = T.conv2d(x, self.kernels), None
        return out

    def backward(self, grad):
        dx, dk = T.conv2d_backward(grad, self._x, self.kernels, self._cols)
        self.grads = {"kernels": dk}
        self._x = self._cols = None
        return dx

    def output_shape(self, shape):
        return (self.c_out, shape[1], shape[2])

    def flops(self, shape=None):
        return self.c_in * self.k * self.k * self.h * self.w * self.c_out, 0

    def penalty(self):
        return 0.0


class MaxPool2(_Stateless):
    kind = "maxpool2"

    def forward(self, x, train=False):
        out, self._arg = T.maxpool2(x)
        return out

    def backward(self, grad):
        return T.maxpool2_backward(grad, self._arg)

    def output_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)


class Flatten(_Stateless):
    kind = "flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense:
    kind = "dense"
    decay = ("weights",)

    def __init__(self, n_in, n_out, dtype=np.float32):
        self.n_in, self.n_out = n_in, n_out
        self.weights = np.zeros((n_in, n_out), dtype=dtype)
        self.bias = np.zeros(n_out, dtype=dtype)
        self.grads: Dict[str, np.ndarray] = {}

    @property
    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, train=False):
        self._x = x
        return x @ self.weights + self.bias

    def backward(self, grad):
        dx, dw, db = T.dense_backward(grad, self._x, self.weights)
        self.grads = {"weights": dw, "bias": db}
        self._x = None
        return dx

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.n_in:
            raise ShapeError(f"dense layer expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def flops(self, shape=None):
        return self.n_in * self.n_out, 0

    def penalty(self):
        return 0.0


class ReLU(_Stateless):
    kind = "relu"

    def forward(self, x, train=False):
        self._x = x
        return T.relu(x)

    def backward(self, grad):
        return T.relu_backward(grad, self._x)


class Dropout(_Stateless):
    kind = "dropout"

    def __init__(self, rate=0.5, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        out, self._mask = T.dropout(x, self.rate, train, self.rng)
        return out

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask
