"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"TKN1"
    record_count
    record_count x (byte_length, utf-8 text)     # manifest
    every parameter array, float32 little-endian, in model.parameters() order

Manifest records are: a header ``name=... input=CxHxW classes=N seed=S``,
one record per layer (``LayerSpec.to_text``), then one ``array <key> <shape>``
record per stored array.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import List

import numpy as np

from .exceptions import CheckpointError
from .network import LayerSpec, Model, NetworkSpec

MAGIC = b"TKN1"
_U32 = struct.Struct("<I")


def _shape_text(shape) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def manifest(model: Model) -> List[str]:
    spec = model.spec
    recs = [f"name={spec.name} input={_shape_text(spec.input_shape)} "
            f"classes={spec.num_classes} seed={model.seed}"]
    recs += [ls.to_text() for ls in spec.layers]
    recs += [f"array {key} {_shape_text(arr.shape)}" for key, arr in model.state()]
    return recs


def to_bytes(model: Model) -> bytes:
    parts = [MAGIC]
    recs = manifest(model)
    parts.append(_U32.pack(len(recs)))
    for r in recs:
        b = r.encode("utf-8")
        parts.append(_U32.pack(len(b)) + b)
    for _, arr in model.state():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def from_bytes(raw: bytes) -> Model:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(raw):
            raise CheckpointError("truncated checkpoint manifest")
        (v,) = _U32.unpack_from(raw, pos)
        pos += 4
        return v

    recs = []
    for _ in range(u32()):
        n = u32()
        if pos + n > len(raw):
            raise CheckpointError("truncated checkpoint manifest")
        recs.append(raw[pos:pos + n])
        pos += n
    try:
        recs = [r.decode("utf-8") for r in recs]
        header = dict(kv.split("=", 1) for kv in recs[0].split())
        layer_recs = [r for r in recs[1:] if not r.startswith("array ")]
        array_recs = [r for r in recs[1:] if r.startswith("array ")]
        spec = NetworkSpec(
            tuple(int(d) for d in header["input"].split("x")),
            int(header["classes"]),
            [LayerSpec.from_text(r) for r in layer_recs],
            header["name"],
        )
        if len(spec.input_shape) != 3 or not spec.layers:
            raise ValueError(f"need a CxHxW input and at least one layer, got {header['input']}")
        spec.shapes()
    except (ValueError, KeyError, IndexError) as e:
        raise CheckpointError(f"malformed checkpoint manifest: {e}") from e
    model = Model(spec, np.float32, int(header.get("seed", 0)))
    expected = model.state()
    if len(expected) != len(array_recs):
        raise CheckpointError("array manifest does not match the layer list")
    arrays = []
    for (key, arr), rec in zip(expected, array_recs):
        _, rkey, shape = rec.split()
        if rkey != key or shape != _shape_text(arr.shape):
            raise CheckpointError(f"array record {rec!r} does not match expected {key} {arr.shape}")
        nbytes = arr.size * 4
        if pos + nbytes > len(raw):
            raise CheckpointError("truncated checkpoint payload")
        arrays.append(np.frombuffer(raw, dtype="<f4", count=arr.size, offset=pos).reshape(arr.shape))
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes in checkpoint")
    # clipping is idempotent on saved (already projected) parameters, so
    # refresh() only rebuilds the rois here
    for (_, dst), src in zip(expected, arrays):
        dst[...] = src
    model.refresh()
    return model


def load(path) -> Model:
    return from_bytes(Path(path).read_bytes())
