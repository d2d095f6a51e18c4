import os
from pathlib import Path

import numpy as np
import pytest

from uam import data

REPO = Path(__file__).resolve().parents[1]


def mnist_dir():
    for cand in (os.environ.get("UAM_DATA_DIR"), REPO / "data" / "mnist"):
        if not cand:
            continue
        cand = Path(cand)
        if any((cand / f"train-labels-idx1-ubyte{ext}").exists() for ext in ("", ".gz")):
            return cand
    return None


@pytest.fixture(scope="session")
def mnist_path():
    path = mnist_dir()
    if path is None:
        pytest.skip("MNIST files not found (set UAM_DATA_DIR)")
    return path


def write_fake_mnist(directory, train=60000, test=10000, seed=0):
    """Small-valued synthetic IDX files with the real MNIST sizes.

    Each class lights up its own 8x8 block, so tiny nets learn it quickly;
    a tenth of the labels are then redrawn so error rates stay above zero.
    """
    rng = np.random.default_rng(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for prefix, count in (("train", train), ("t10k", test)):
        labels = rng.integers(0, 10, size=count).astype(np.uint8)
        images = rng.integers(0, 40, size=(count, 28, 28)).astype(np.uint8)
        for c in range(10):
            r, col = divmod(c, 3)
            images[labels == c, 8 * r:8 * r + 8, 8 * col:8 * col + 8] += 200
        noisy = rng.random(count) < 0.1
        labels[noisy] = rng.integers(0, 10, size=noisy.sum())
        (directory / f"{prefix}-images-idx3-ubyte").write_bytes(data.serialize_idx(images))
        (directory / f"{prefix}-labels-idx1-ubyte").write_bytes(data.serialize_idx(labels))
    return directory


@pytest.fixture(scope="session")
def fake_mnist(tmp_path_factory):
    return write_fake_mnist(tmp_path_factory.mktemp("fake_mnist"))


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for ok, name, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
