"""Parametric attention windows, their sampled maps, and the rois they imply.

Coordinates are relative: sample points along an axis of length ``L`` sit
at ``i / (L - 1)``, so both boundary pixels land exactly on 0 and 1. The
``x`` parameters act along columns (width) and the ``y`` parameters along
rows (height); a kernel's map is ``F[i, j] = f_y[i] * f_x[j]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .tensor import Roi

FAMILIES = ("gaussian", "cauchy")

# window value at |u| = 1/sqrt(2), i.e. exactly on the roi edge
EDGE_THRESHOLD = {"gaussian": math.exp(-0.25), "cauchy": 2.0 / 3.0}

_SNAP_TOL = 1e-9


def _check_family(family: str) -> str:
    family = family.lower()
    if family not in FAMILIES:
        raise ValueError(f"unknown attention family {family!r}; expected one of {FAMILIES}")
    return family


def eval_window(family: str, u):
    """Window value at normalized offset ``u = (x - mean) / scale``; peak 1 at 0."""
    family = _check_family(family)
    u = np.asarray(u, dtype=float) if np.isscalar(u) else u
    if family == "gaussian":
        return np.exp(-0.5 * u * u)
    return 1.0 / (1.0 + u * u)


def window_slope(family: str, u):
    """Derivative of :func:`eval_window` with respect to ``u``."""
    f = eval_window(family, u)
    if family == "gaussian":
        return -u * f
    return -2.0 * u * f * f


def sample_points(length: int, dtype=np.float64) -> np.ndarray:
    if length < 1:
        raise ValueError("sample length must be >= 1")
    if length == 1:
        return np.full(1, 0.5, dtype=dtype)
    return np.arange(length, dtype=dtype) / (length - 1)


def sample_vector(family: str, m: float, s: float, length: int) -> np.ndarray:
    x = sample_points(length)
    return eval_window(family, (x - m) / s)


@dataclass
class AttentionParams:
    """Per-kernel relative window parameters, one entry per output kernel."""

    m_x: np.ndarray
    m_y: np.ndarray
    s_x: np.ndarray
    s_y: np.ndarray
    family: str = "cauchy"

    def __post_init__(self):
        self.family = _check_family(self.family)
        for name in ("m_x", "m_y", "s_x", "s_y"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name))))
        n = len(self.m_x)
        if any(len(getattr(self, k)) != n for k in ("m_y", "s_x", "s_y")):
            raise ValueError("attention parameter vectors differ in length")

    @classmethod
    def initial(cls, n_kernels: int, family: str = "cauchy", dtype=np.float32) -> "AttentionParams":
        """Centered windows (mean 0.5) with unit scale."""
        half = np.full(n_kernels, 0.5, dtype=dtype)
        one = np.ones(n_kernels, dtype=dtype)
        return cls(half.copy(), half.copy(), one.copy(), one.copy(), family)

    def __len__(self) -> int:
        return len(self.m_x)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"m_x": self.m_x, "m_y": self.m_y, "s_x": self.s_x, "s_y": self.s_y}

    def copy(self) -> "AttentionParams":
        return AttentionParams(
            self.m_x.copy(), self.m_y.copy(), self.s_x.copy(), self.s_y.copy(), self.family
        )

    def kernel(self, c: int) -> "AttentionParams":
        return AttentionParams(
            self.m_x[c:c + 1], self.m_y[c:c + 1], self.s_x[c:c + 1], self.s_y[c:c + 1], self.family
        )


@dataclass
class AttentionMap:
    f_x: np.ndarray  # (C, W), along columns
    f_y: np.ndarray  # (C, H), along rows
    F: np.ndarray = field(repr=False)  # (C, H, W)


def build_map(params: AttentionParams, h: int, w: int) -> AttentionMap:
    dtype = np.result_type(params.m_x, params.s_x)
    xs = sample_points(w, dtype)
    ys = sample_points(h, dtype)
    f_x = eval_window(params.family, (xs[None, :] - params.m_x[:, None]) / params.s_x[:, None])
    f_y = eval_window(params.family, (ys[None, :] - params.m_y[:, None]) / params.s_y[:, None])
    return AttentionMap(f_x, f_y, f_y[:, :, None] * f_x[:, None, :])


def scale_floor(extent: int, k: int) -> float:
    """Smallest relative scale whose roi still spans ``k`` pixels."""
    return k / (math.sqrt(2.0) * extent)


def clip_params(params: AttentionParams, h: int, w: int, k: int) -> AttentionParams:
    """Project parameters back onto the feasible set (idempotent)."""
    dt_x = params.s_x.dtype.type
    dt_y = params.s_y.dtype.type
    return AttentionParams(
        np.clip(params.m_x, 0, 1),
        np.clip(params.m_y, 0, 1),
        np.maximum(params.s_x, dt_x(scale_floor(w, k))),
        np.maximum(params.s_y, dt_y(scale_floor(h, k))),
        params.family,
    )


def clip_params_(params: AttentionParams, h: int, w: int, k: int) -> None:
    """In-place variant of :func:`clip_params` used after optimizer steps."""
    clipped = clip_params(params, h, w, k)
    for name, arr in params.arrays().items():
        arr[...] = getattr(clipped, name)


def raw_bounds(m: float, s: float, extent: int):
    """Unclamped continuous roi interval along one axis, in pixels."""
    half = float(s) / math.sqrt(2.0)
    return (float(m) - half) * extent, (float(m) + half) * extent


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < _SNAP_TOL else v


def axis_interval(m: float, s: float, extent: int, k: int):
    lo, hi = raw_bounds(m, s, extent)
    a = min(max(math.floor(_snap(lo)), 0), extent - k)
    b = min(max(math.ceil(_snap(hi)), a + k), extent)
    return a, b


def kernel_roi(m_x: float, m_y: float, s_x: float, s_y: float, h: int, w: int, k: int) -> Roi:
    x0, x1 = axis_interval(m_x, s_x, w, k)
    y0, y1 = axis_interval(m_y, s_y, h, k)
    return Roi(x0, y0, x1, y1)


def compute_roi(params: AttentionParams, h: int, w: int, k: int) -> List[Roi]:
    """One roi per kernel: the window's +-scale/sqrt(2) box, floored/ceiled and clamped."""
    return [
        kernel_roi(params.m_x[c], params.m_y[c], params.s_x[c], params.s_y[c], h, w, k)
        for c in range(len(params))
    ]


def grad_params(
    upstream: np.ndarray, pre_attention: np.ndarray, params: AttentionParams, h: int, w: int,
    amap: AttentionMap | None = None,
) -> Dict[str, np.ndarray]:
    """Gradient of ``sum(upstream * pre_attention * F)`` w.r.t. each window parameter.

    ``upstream`` and ``pre_attention`` are ``(C, H, W)`` or batched
    ``(N, C, H, W)``; batches are summed.
    """
    prod = upstream * pre_attention
    if prod.ndim == 4:
        prod = prod.sum(axis=0)
    if amap is None:
        amap = build_map(params, h, w)
    fam = params.family
    xs = sample_points(w, prod.dtype)
    ys = sample_points(h, prod.dtype)
    s_x = params.s_x[:, None]
    s_y = params.s_y[:, None]
    u_x = (xs[None, :] - params.m_x[:, None]) / s_x
    u_y = (ys[None, :] - params.m_y[:, None]) / s_y
    slope_x = window_slope(fam, u_x)
    slope_y = window_slope(fam, u_y)
    # separability: contract the other axis first
    col = np.einsum("cij,ci->cj", prod, amap.f_y)
    row = np.einsum("cij,cj->ci", prod, amap.f_x)
    return {
        "m_x": (col * slope_x * (-1.0 / s_x)).sum(axis=1),
        "s_x": (col * slope_x * (-u_x / s_x)).sum(axis=1),
        "m_y": (row * slope_y * (-1.0 / s_y)).sum(axis=1),
        "s_y": (row * slope_y * (-u_y / s_y)).sum(axis=1),
    }
