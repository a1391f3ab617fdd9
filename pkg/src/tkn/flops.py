"""Analytic operation counts.

One multiply-accumulate counts as one operation. Convolutions cost
``c_in * k^2 * h * w * c_out``, dense layers ``in * out``, and target
layers only pay for the pixels inside each kernel's roi, plus one
attention multiply per computed output pixel (reported separately).
Pooling, activations and dropout are not counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Union

from .attention import kernel_roi
from .network import Model, NetworkSpec, count_params
from .target import target_flops
from .tensor import Roi


@dataclass
class FlopEntry:
    index: int
    kind: str
    macs: int
    attention: int = 0


@dataclass
class FlopReport:
    name: str
    entries: List[FlopEntry] = field(default_factory=list)
    dense_total: int = 0
    params: int = 0

    @property
    def macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def conv_macs(self) -> int:
        return sum(e.macs for e in self.entries if e.kind in ("conv", "target", "ar"))

    @property
    def attention(self) -> int:
        return sum(e.attention for e in self.entries)

    @property
    def total(self) -> int:
        return self.macs + self.attention

    @property
    def ratio(self) -> float:
        """Total relative to the all-dense twin network (1.0 for a plain CNN)."""
        return self.total / self.dense_total if self.dense_total else 1.0

    @property
    def speedup(self) -> float:
        return self.dense_total / self.total if self.total else float("inf")

    def to_text(self) -> str:
        lines = [f"{'layer':>5}  {'kind':<8} {'macs':>14} {'attention':>11}"]
        for e in self.entries:
            if e.macs or e.attention:
                lines.append(f"{e.index:>5}  {e.kind:<8} {e.macs:>14,} {e.attention:>11,}")
        lines.append(f"{'':>5}  {'total':<8} {self.macs:>14,} {self.attention:>11,}")
        lines.append(f"model={self.name} params={self.params:,} flops={self.total:,} "
                     f"({self.total / 1e6:.1f}M) dense_twin={self.dense_total:,} ratio={self.ratio:.4f}")
        return "\n".join(lines)

    def to_records(self) -> str:
        recs = [f"layer={e.index} kind={e.kind} macs={e.macs} attention={e.attention}"
                for e in self.entries if e.macs or e.attention]
        recs.append(f"model={self.name} params={self.params} macs={self.macs} conv_macs={self.conv_macs} "
                    f"attention={self.attention} total={self.total} dense_total={self.dense_total} "
                    f"ratio={self.ratio:.6f}")
        return "\n".join(recs)


def _spec_entries(spec: NetworkSpec, rois_for=None) -> List[FlopEntry]:
    entries = []
    for i, (ls, shape) in enumerate(zip(spec.layers, spec.input_shapes())):
        if ls.kind == "conv":
            entries.append(FlopEntry(i, "conv", shape[0] * ls.kernel ** 2 * shape[1] * shape[2] * ls.channels))
        elif ls.kind in ("target", "ar"):
            h, w = shape[1:]
            if ls.kind == "target" and rois_for is not None:
                rois = rois_for(i)
            else:
                rois = [Roi.full(h, w)] * ls.channels
            macs, att = target_flops(rois, shape[0], ls.kernel)
            entries.append(FlopEntry(i, ls.kind, macs, att))
        elif ls.kind == "dense":
            entries.append(FlopEntry(i, "dense", shape[0] * ls.units))
        else:
            entries.append(FlopEntry(i, ls.kind, 0))
    return entries


def count(obj: Union[NetworkSpec, Model]) -> FlopReport:
    """Per-layer forward-pass cost for one input image.

    A bare spec is counted at initialization (every roi is the full
    activation); a model is counted with its current rois.
    """
    if isinstance(obj, Model):
        spec = obj.spec
        entries = _spec_entries(spec, lambda i: obj.layers[i].rois)
    else:
        spec = obj
        entries = _spec_entries(spec)
    dense = sum(e.macs for e in _spec_entries(spec.dense_twin()))
    return FlopReport(spec.name, entries, dense, count_params(spec))


def rois_with_scaled_windows(model: Model, layer_index: int, factor: float) -> List[Roi]:
    """Rois a target layer would get if every scale were multiplied by ``factor``."""
    layer = model.layers[layer_index]
    a = layer.attn
    return [kernel_roi(a.m_x[c], a.m_y[c], a.s_x[c] * factor, a.s_y[c] * factor,
                       layer.h, layer.w, layer.k) for c in range(len(a))]
