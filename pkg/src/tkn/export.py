"""Render attention maps and roi overlays as binary PGM (P5) images."""
from __future__ import annotations

import math
import re
from pathlib import Path
from typing import Iterable, List

import numpy as np

from .attention import build_map

GUTTER_VALUE = 128


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to bytes with round-half-up: ``round(255 * v)``."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM export needs a 2D uint8 array")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = raw[m.end():]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def grid_shape(n: int):
    cols = max(1, math.ceil(math.sqrt(n)))
    return math.ceil(n / cols), cols


def tile(tiles: np.ndarray, gutter: int = 1) -> np.ndarray:
    """Lay out ``(n, h, w)`` byte tiles row-major on a grid with mid-gray gutters."""
    n, h, w = tiles.shape
    rows, cols = grid_shape(n)
    out = np.full((rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter),
                  GUTTER_VALUE, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = r * (h + gutter), c * (w + gutter)
        out[y:y + h, x:x + w] = tiles[i]
    return out


def untile(image: np.ndarray, n: int, h: int, w: int, gutter: int = 1) -> np.ndarray:
    _, cols = grid_shape(n)
    out = np.empty((n, h, w), dtype=image.dtype)
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = r * (h + gutter), c * (w + gutter)
        out[i] = image[y:y + h, x:x + w]
    return out


def _attentive(model, layer_index):
    layer = model.layers[layer_index]
    if not hasattr(layer, "attn"):
        raise ValueError(f"layer {layer_index} ({layer.kind}) has no attention parameters")
    return layer


def layer_maps(model, layer_index: int) -> np.ndarray:
    layer = _attentive(model, layer_index)
    return build_map(layer.attn, layer.h, layer.w).F


def export_maps(model, out_dir, layers: Iterable[int] | None = None) -> List[Path]:
    """Write one tiled map image per attentive layer; returns the paths written."""
    if layers is None:
        layers = [i for i, _ in model.target_layers()]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in layers:
        path = out_dir / f"layer{i:02d}_maps.pgm"
        write_pgm(path, tile(quantize(layer_maps(model, i))))
        paths.append(path)
    return paths


def overlay_tiles(model, layer_index: int) -> np.ndarray:
    layer = _attentive(model, layer_index)
    if not hasattr(layer, "rois"):
        raise ValueError(f"layer {layer_index} ({layer.kind}) has no rois")
    tiles = quantize(layer_maps(model, layer_index))
    for t, roi in zip(tiles, layer.rois):
        t[roi.y0, roi.x0:roi.x1] = 255
        t[roi.y1 - 1, roi.x0:roi.x1] = 255
        t[roi.y0:roi.y1, roi.x0] = 255
        t[roi.y0:roi.y1, roi.x1 - 1] = 255
    return tiles


def export_roi_overlay(model, layer_index: int, out_path) -> Path:
    """Maps of one target layer with each kernel's roi outlined at 255."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out_path, tile(overlay_tiles(model, layer_index)))
    return out_path
