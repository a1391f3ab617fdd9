"""Dense numeric kernels on (batch, channel, height, width) arrays.

Convolutions are "same"-padded cross-correlations without bias, lowered to
matrix multiplies through an im2col view. ``conv2d_roi`` restricts each
output kernel to its own rectangle and only spends multiply-accumulates
inside it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .exceptions import NumericalError, RoiError, ShapeError


@dataclass(frozen=True, order=True)
class Roi:
    """Half-open pixel rectangle ``[y0, y1) x [x0, x1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @classmethod
    def full(cls, h: int, w: int) -> "Roi":
        return cls(0, 0, w, h)

    def is_full(self, h: int, w: int) -> bool:
        return self == Roi.full(h, w)

    def validate(self, h: int, w: int, k: int = 1) -> None:
        if not (0 <= self.x0 < self.x1 <= w and 0 <= self.y0 < self.y1 <= h):
            raise RoiError(f"{self} exceeds activation bounds {h}x{w}")
        if self.width < k or self.height < k:
            raise RoiError(f"{self} is smaller than the {k}x{k} kernel")

    def mask(self, h: int, w: int) -> np.ndarray:
        m = np.zeros((h, w), dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m


def check_finite(arr: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")
    return arr


def _check_conv_args(x: np.ndarray, kernels: np.ndarray) -> int:
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-axis input, got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernels must be (c_out, c_in, k, k), got {kernels.shape}")
    k = kernels.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernels expect {kernels.shape[1]}"
        )
    return k


def _padded(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded input in channel-major ``(c, n, h + 2p, w + 2p)`` layout."""
    n, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3)
    return xp


def im2col(x: np.ndarray, k: int, roi: Roi | None = None, xp: np.ndarray | None = None) -> np.ndarray:
    """Patch matrix of shape ``(c*k*k, n, h, w)`` for the output pixels in ``roi``.

    Reads the roi expanded by the (k-1)/2 halo; zeros appear only where that
    halo crosses the image boundary.
    """
    n, c, hh, ww = x.shape
    if roi is None:
        roi = Roi.full(hh, ww)
    if xp is None:
        xp = _padded(x, k)
    h, w = roi.height, roi.width
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, :, roi.y0 + ki:roi.y0 + ki + h, roi.x0 + kj:roi.x0 + kj + w]
    return cols.reshape(c * k * k, n, h, w)


def col2im_add(dcols: np.ndarray, dxp: np.ndarray, k: int, roi: Roi) -> None:
    """Scatter-add patch gradients ``(c*k*k, n, h, w)`` into a padded ``(c, n, H, W)`` gradient."""
    _, n, h, w = dcols.shape
    d = dcols.reshape(dxp.shape[0], k, k, n, h, w)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, roi.y0 + ki:roi.y0 + ki + h, roi.x0 + kj:roi.x0 + kj + w] += d[:, ki, kj]


def _unpad(dxp: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    if p:
        dxp = dxp[:, :, p:-p, p:-p]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))


def conv2d(x: np.ndarray, kernels: np.ndarray, return_cols: bool = False):
    """Same-padded, bias-free 2D convolution.

    >>> conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))[0, 0]
    array([[4., 6., 4.],
           [6., 9., 6.],
           [4., 6., 4.]])
    """
    k = _check_conv_args(x, kernels)
    n, _, h, w = x.shape
    cols = im2col(x, k)
    out = kernels.reshape(kernels.shape[0], -1) @ cols.reshape(cols.shape[0], -1)
    out = np.ascontiguousarray(out.reshape(-1, n, h, w).transpose(1, 0, 2, 3))
    check_finite(out, "conv2d output")
    return (out, cols) if return_cols else out


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray, cols: np.ndarray | None = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients ``(d_input, d_kernels)`` of a same-padded convolution."""
    k = _check_conv_args(x, kernels)
    n, c, h, w = x.shape
    c_out = kernels.shape[0]
    if cols is None:
        cols = im2col(x, k)
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(c_out, -1)
    cols2d = cols.reshape(cols.shape[0], -1)
    dk = (g @ cols2d.T).reshape(kernels.shape)
    dcols = (kernels.reshape(c_out, -1).T @ g).reshape(-1, n, h, w)
    p = (k - 1) // 2
    dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    col2im_add(dcols, dxp, k, Roi.full(h, w))
    return _unpad(dxp, k), dk


def group_rois(rois: Sequence[Roi]) -> Dict[Roi, np.ndarray]:
    """Map each distinct roi to the (sorted) kernel indices that use it."""
    groups: Dict[Roi, List[int]] = {}
    for i, r in enumerate(rois):
        groups.setdefault(r, []).append(i)
    return {r: np.asarray(ix) for r, ix in sorted(groups.items())}


def union_roi(rois: Sequence[Roi]) -> Roi:
    """Smallest rectangle containing every roi."""
    return Roi(min(r.x0 for r in rois), min(r.y0 for r in rois),
               max(r.x1 for r in rois), max(r.y1 for r in rois))


# Fixed cost of one extra patch-matrix pass, in units of "one more kernel row"
# in the matrix multiply. Patch copies and skinny multiplies are memory bound,
# so this is large; measured on numpy/OpenBLAS. Only affects speed.
GROUP_OVERHEAD = 64


def roi_plan(rois: Sequence[Roi]) -> Dict[Roi, np.ndarray]:
    """Execution plan: region -> kernels evaluated together over that region.

    Either one group per distinct roi, or all kernels over the bounding box
    of the rois (then masked back to each kernel's own roi), whichever is
    estimated cheaper. Both give identical outputs.
    """
    groups = group_rois(rois)
    if len(groups) <= 1:
        return groups
    box = union_roi(list(groups))
    grouped = sum(r.area * (len(ix) + GROUP_OVERHEAD) for r, ix in groups.items())
    boxed = box.area * (len(rois) + GROUP_OVERHEAD)
    return {box: np.arange(len(rois))} if boxed <= grouped else groups


def _plan_mask(rois: Sequence[Roi], region: Roi, idx: np.ndarray):
    """``(len(idx), 1, h, w)`` mask of each kernel's roi inside ``region``; None if all fill it."""
    if all(rois[i] == region for i in idx):
        return None
    m = np.zeros((len(idx), 1, region.height, region.width), dtype=bool)
    for j, i in enumerate(idx):
        r = rois[i]
        m[j, 0, r.y0 - region.y0:r.y1 - region.y0, r.x0 - region.x0:r.x1 - region.x0] = True
    return m


def _check_rois(rois: Sequence[Roi], c_out: int, h: int, w: int, k: int) -> None:
    if len(rois) != c_out:
        raise ShapeError(f"need one roi per kernel ({c_out}), got {len(rois)}")
    for r in rois:
        r.validate(h, w, k)


def conv2d_roi(
    x: np.ndarray, kernels: np.ndarray, rois: Sequence[Roi], return_cols: bool = False
):
    """Convolution evaluated only inside each kernel's roi; zero elsewhere.

    Kernels are batched into matrix multiplies according to
    :func:`roi_plan`. With ``return_cols`` the patch matrices are returned
    (keyed by plan region) for reuse in :func:`conv2d_roi_backward`.
    """
    k = _check_conv_args(x, kernels)
    n, _, h, w = x.shape
    c_out = kernels.shape[0]
    _check_rois(rois, c_out, h, w, k)
    out = np.zeros((n, c_out, h, w), dtype=np.result_type(x, kernels))
    kmat = kernels.reshape(c_out, -1)
    xp = _padded(x, k)
    cols_by_roi = {}
    for region, idx in roi_plan(rois).items():
        cols = im2col(x, k, region, xp)
        if return_cols:
            cols_by_roi[region] = cols
        res = (kmat[idx] @ cols.reshape(cols.shape[0], -1)).reshape(len(idx), n, region.height, region.width)
        mask = _plan_mask(rois, region, idx)
        if mask is not None:
            res *= mask
        out[:, idx, region.y0:region.y1, region.x0:region.x1] = res.transpose(1, 0, 2, 3)
    check_finite(out, "conv2d_roi output")
    if return_cols:
        return out, cols_by_roi
    return out


def conv2d_roi_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernels: np.ndarray,
    rois: Sequence[Roi],
    cols_by_roi: Dict[Roi, np.ndarray] | None = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients ``(d_input, d_kernels)`` of :func:`conv2d_roi`.

    Entries of ``grad_out`` outside a kernel's roi are ignored, since the
    forward output there is a constant zero.
    """
    k = _check_conv_args(x, kernels)
    n, c, h, w = x.shape
    c_out = kernels.shape[0]
    kmat = kernels.reshape(c_out, -1)
    p = (k - 1) // 2
    dtype = np.result_type(grad_out, x, kernels)
    dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=dtype)
    dk = np.zeros_like(kmat, dtype=dtype)
    xp = None
    for region, idx in roi_plan(rois).items():
        if cols_by_roi is not None and region in cols_by_roi:
            cols = cols_by_roi[region]
        else:
            if xp is None:
                xp = _padded(x, k)
            cols = im2col(x, k, region, xp)
        g = grad_out[:, idx, region.y0:region.y1, region.x0:region.x1].transpose(1, 0, 2, 3)
        mask = _plan_mask(rois, region, idx)
        g = g * mask if mask is not None else np.ascontiguousarray(g)
        g = g.reshape(len(idx), -1)
        cols2d = cols.reshape(cols.shape[0], -1)
        dk[idx] = g @ cols2d.T
        dcols = (kmat[idx].T @ g).reshape(-1, n, region.height, region.width)
        col2im_add(dcols, dxp, k, region)
    return _unpad(dxp, k), dk.reshape(kernels.shape)


def _quadrants(x: np.ndarray):
    return x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]


def maxpool2(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 max pool with stride 2. Returns ``(out, argmax)``; ties go to the first.

    ``argmax`` indexes the 2x2 window in row-major order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    q = _quadrants(x)
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    arg = np.full(out.shape, 3, dtype=np.int8)
    for i in (2, 1, 0):
        arg[q[i] == out] = i
    return out, arg


def maxpool2_backward(grad_out: np.ndarray, arg: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    dx = np.zeros((n, c, 2 * h2, 2 * w2), dtype=grad_out.dtype)
    for i, dq in enumerate(_quadrants(dx)):
        np.multiply(grad_out, arg == i, out=dq)
    return dx


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``x @ weights + bias`` with ``weights`` of shape (in, out)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} do not compose"
        )
    return check_finite(x @ weights + bias, "dense output")


def dense_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def dropout(
    x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None = None
) -> Tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns ``(out, scale_mask)``; the mask is None at eval."""
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not match")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsum
    loss = float(-logp.mean())
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n

