"""Target layer: roi-restricted convolution followed by attention weighting.

The functional pair :func:`target_forward` / :func:`target_backward` does the
math; :class:`TargetLayer` owns kernels, window parameters and cached rois.
:class:`ARLayer` is the unsliced variant (dense convolution, then attention)
kept for ablations and as a reference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .attention import (
    AttentionMap,
    AttentionParams,
    build_map,
    clip_params_,
    compute_roi,
    grad_params,
)
from .exceptions import ShapeError
from .tensor import Roi, conv2d, conv2d_backward, conv2d_roi, conv2d_roi_backward


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from an outdated forward pass."""


@dataclass
class TargetCache:
    x: np.ndarray
    pre_attention: np.ndarray
    amap: AttentionMap
    rois: Tuple[Roi, ...]
    cols: Dict[Roi, np.ndarray]
    version: int = 0


def target_forward(
    x: np.ndarray, kernels: np.ndarray, params: AttentionParams, rois: Sequence[Roi],
    keep_cols: bool = True,
) -> Tuple[np.ndarray, TargetCache]:
    """Attention-weighted roi convolution. Without ``keep_cols`` the patch
    matrices are dropped and backward recomputes them."""
    h, w = x.shape[2:]
    if keep_cols:
        a_tar, cols = conv2d_roi(x, kernels, rois, return_cols=True)
    else:
        a_tar, cols = conv2d_roi(x, kernels, rois), {}
    amap = build_map(params, h, w)
    out = a_tar * amap.F[None].astype(a_tar.dtype, copy=False)
    return out, TargetCache(x, a_tar, amap, tuple(rois), cols)


def target_backward(
    upstream: np.ndarray,
    cache: TargetCache,
    kernels: np.ndarray,
    params: AttentionParams,
    l2_penalty: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """Returns ``(d_input, d_kernels, d_params)``; scale penalty gradient included."""
    if upstream.shape != cache.pre_attention.shape:
        raise ShapeError(f"upstream {upstream.shape} vs output {cache.pre_attention.shape}")
    h, w = cache.x.shape[2:]
    d_tar = upstream * cache.amap.F[None]
    dx, dk = conv2d_roi_backward(d_tar, cache.x, kernels, cache.rois, cache.cols)
    dp = grad_params(upstream, cache.pre_attention, params, h, w, cache.amap)
    if l2_penalty:
        dp["s_x"] = dp["s_x"] + 2.0 * l2_penalty * params.s_x
        dp["s_y"] = dp["s_y"] + 2.0 * l2_penalty * params.s_y
    dp = {k: v.astype(params.s_x.dtype, copy=False) for k, v in dp.items()}
    return dx, dk, dp


def target_flops(rois: Sequence[Roi], c_in: int, k: int) -> Tuple[int, int]:
    """``(conv MACs, attention multiplies)`` for one forward pass of one image."""
    area = sum(r.area for r in rois)
    return c_in * k * k * area, area


class _AttentiveBase:
    decay = ("kernels",)

    def __init__(self, c_in, c_out, k, input_hw, family="cauchy", l2_penalty=0.0, dtype=np.float32):
        if k % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {k}")
        if l2_penalty < 0:
            raise ValueError("l2_penalty must be >= 0")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.h, self.w = input_hw
        self.kernels = np.zeros((c_out, c_in, k, k), dtype=dtype)
        self.attn = AttentionParams.initial(c_out, family, dtype)
        self.l2_penalty = float(l2_penalty)
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {"kernels": self.kernels, **self.attn.arrays()}

    def penalty(self) -> float:
        return self.l2_penalty * float(np.sum(self.attn.s_x.astype(np.float64) ** 2)
                                       + np.sum(self.attn.s_y.astype(np.float64) ** 2))

    def output_shape(self, shape):
        return (self.c_out, shape[1], shape[2])

    def refresh(self) -> None:
        clip_params_(self.attn, self.h, self.w, self.k)


class TargetLayer(_AttentiveBase):
    kind = "target"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._version = 0
        self.rois: List[Roi] = []
        self.refresh()

    def refresh(self) -> None:
        """Clip the window parameters and recompute rois; call after each step."""
        super().refresh()
        self.rois = compute_roi(self.attn, self.h, self.w, self.k)
        self._version += 1

    def forward(self, x, train=False):
        out, cache = target_forward(x, self.kernels, self.attn, self.rois, keep_cols=train)
        cache.version = self._version
        self._cache = cache
        return out

    def backward(self, grad):
        cache = self._cache
        if cache is None or cache.version != self._version:
            raise StaleCacheError("target layer parameters changed since the last forward")
        dx, dk, dp = target_backward(grad, cache, self.kernels, self.attn, self.l2_penalty)
        self.grads = {"kernels": dk, **dp}
        self._cache = None
        return dx

    def flops(self, shape=None) -> Tuple[int, int]:
        return target_flops(self.rois, self.c_in, self.k)


class ARLayer(_AttentiveBase):
    """Dense convolution with attention weighting; no roi slicing."""

    kind = "ar"

    def forward(self, x, train=False):
        h, w = x.shape[2:]
        pre, cols = conv2d(x, self.kernels, return_cols=True) if train else (conv2d(x, self.kernels), None)
        amap = build_map(self.attn, h, w)
        self._cache = (x, pre, amap, cols)
        return pre * amap.F[None]

    def backward(self, grad):
        x, pre, amap, cols = self._cache
        h, w = x.shape[2:]
        dx, dk = conv2d_backward(grad * amap.F[None], x, self.kernels, cols)
        dp = grad_params(grad, pre, self.attn, h, w, amap)
        dp["s_x"] = dp["s_x"] + 2.0 * self.l2_penalty * self.attn.s_x
        dp["s_y"] = dp["s_y"] + 2.0 * self.l2_penalty * self.attn.s_y
        self.grads = {"kernels": dk, **dp}
        self._cache = None
        return dx

    def flops(self, shape=None) -> Tuple[int, int]:
        hw = self.h * self.w
        return self.c_in * self.k * self.k * hw * self.c_out, hw * self.c_out
