import os
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

MNIST_DIR = Path(os.environ.get("TKN_MNIST_DIR", "/root/data/mnist"))
HAVE_MNIST = (MNIST_DIR / "train-images-idx3-ubyte").exists() or \
    (MNIST_DIR / "train-images-idx3-ubyte.gz").exists()

needs_mnist = pytest.mark.skipif(not HAVE_MNIST, reason=f"MNIST IDX files not found in {MNIST_DIR}")

_ACCEPTANCE = []


def record_criterion(number, name, passed, detail=""):
    _ACCEPTANCE.append((number, name, passed, detail))
    print(f"[criterion {number}] {'PASS' if passed else 'FAIL'} {name}: {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{number:>2}. {'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_fake_mnist(directory, n_train=300, n_test=100, seed=0):
    """Tiny IDX files with MNIST layout: a bright class-dependent block per image."""
    rng = np.random.default_rng(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        imgs = (rng.random((n, 28, 28)) * 60).astype(np.uint8)
        for i, lab in enumerate(labels):
            r, c = divmod(int(lab), 5)
            imgs[i, 4 + 10 * r:12 + 10 * r, 2 + 5 * c:6 + 5 * c] = 255
        with open(directory / f"{prefix}-images-idx3-ubyte", "wb") as fh:
            fh.write(struct.pack(">IIII", 0x803, n, 28, 28) + imgs.tobytes())
        with open(directory / f"{prefix}-labels-idx1-ubyte", "wb") as fh:
            fh.write(struct.pack(">II", 0x801, n) + labels.tobytes())
    return directory


@pytest.fixture
def fake_mnist(tmp_path):
    return write_fake_mnist(tmp_path / "mnist")
