"""MNIST IDX files, the synthetic top-left MNIST set, and epoch batching."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Tuple

import numpy as np

from .exceptions import DataFormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# distractor layout of the top-left MNIST test partition is fixed so that
# error rates are comparable across machines
TLMNIST_TEST_SEED = 1729

DEFAULT_MNIST_DIR = os.environ.get("TKN_MNIST_DIR", "/root/data/mnist")


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, 1, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(
                f"images {self.images.shape} and labels {self.labels.shape} do not match"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "LabeledImageSet":
        return LabeledImageSet(self.images[:n], self.labels[:n])

    @property
    def hw(self) -> Tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        import gzip
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read(path) -> bytes:
    try:
        with _open(path) as fh:
            return fh.read()
    except FileNotFoundError as e:
        raise DataFormatError(f"missing data file: {path}") from e


def read_idx_images(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    if len(raw) - 16 != n * rows * cols:
        raise DataFormatError(f"{path}: payload is {len(raw) - 16} bytes, header promises {n * rows * cols}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if len(raw) - 8 != n:
        raise DataFormatError(f"{path}: payload is {len(raw) - 8} bytes, header promises {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_idx(images_path, labels_path) -> LabeledImageSet:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by 1/255."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise DataFormatError(f"{len(pixels)} images but {len(labels)} labels")
    images = (pixels.astype(np.float32) / np.float32(255.0))[:, None]
    return LabeledImageSet(images, labels.astype(np.int64))


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(images * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_idx(dataset: LabeledImageSet, images_path, labels_path) -> None:
    n, _, h, w = dataset.images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        fh.write(to_bytes(dataset.images).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_mnist(directory=DEFAULT_MNIST_DIR, partition: str = "train") -> LabeledImageSet:
    images, labels = MNIST_FILES[partition]
    d = Path(directory)

    def pick(name):
        for cand in (d / name, d / (name + ".gz")):
            if cand.exists():
                return cand
        raise DataFormatError(f"missing MNIST file {name} in {d}")

    return load_idx(pick(images), pick(labels))


def make_tlmnist(source: LabeledImageSet, seed: int, count: int | None = None) -> LabeledImageSet:
    """Place digit i top-left in a 56x56 canvas with three random distractors.

    Distractors are drawn with replacement from the whole ``source``
    partition (their class is unconstrained). ``count`` keeps only the first
    samples; the result is a prefix of the full set for the same seed.
    """
    n = len(source)
    if source.hw != (28, 28):
        raise DataFormatError(f"top-left MNIST needs 28x28 sources, got {source.hw}")
    picks = np.random.default_rng(seed).integers(0, n, size=(n, 3))
    m = n if count is None else min(count, n)
    out = np.zeros((m, 1, 56, 56), dtype=source.images.dtype)
    out[:, :, :28, :28] = source.images[:m]
    out[:, :, :28, 28:] = source.images[picks[:m, 0]]
    out[:, :, 28:, :28] = source.images[picks[:m, 1]]
    out[:, :, 28:, 28:] = source.images[picks[:m, 2]]
    return LabeledImageSet(out, source.labels[:m].copy())


def epoch_permutation(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batches(dataset: LabeledImageSet, batch_size: int, shuffle_seed: int | None = 0,
            epoch: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)``; the last batch may be short.

    ``shuffle_seed=None`` keeps dataset order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def load_named(name: str, mnist_dir=DEFAULT_MNIST_DIR, seed: int = 0):
    """Resolve ``mnist``, ``tlmnist``, ``mnist-subset:<n>`` or ``tlmnist-subset:<n>``.

    Returns ``(train, test)``; test is always the full test partition.
    """
    base, _, arg = name.partition(":")
    count = None
    if base.endswith("-subset"):
        if not arg.isdigit() or int(arg) < 1:
            raise ValueError(f"bad subset size in {name!r}")
        count = int(arg)
        base = base[: -len("-subset")]
    elif arg:
        raise ValueError(f"unexpected argument in dataset name {name!r}")
    if base not in ("mnist", "tlmnist"):
        raise ValueError(f"unknown dataset {name!r}")
    train = load_mnist(mnist_dir, "train")
    test = load_mnist(mnist_dir, "test")
    if base == "tlmnist":
        return make_tlmnist(train, seed, count), make_tlmnist(test, TLMNIST_TEST_SEED)
    if count is not None:
        train = train.subset(count)
    return train, test
