"""MNIST ingestion and the imbalanced-training sampler."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08
MAX_IDX_ELEMENTS = 1 << 34

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    pass


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX container (gzip-compressed or raw)."""
    data = bytes(data)
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise IdxFormatError(f"corrupt gzip stream: {exc}") from exc
    if len(data) < 4:
        raise IdxFormatError("stream too short for an IDX header")
    zero0, zero1, dtype, ndim = data[0], data[1], data[2], data[3]
    if zero0 or zero1 or dtype != IDX_UBYTE or ndim not in (1, 3):
        raise IdxFormatError(f"bad magic {data[:4].hex()}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError("truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = 1
    for d in dims:
        size *= d
        if size > MAX_IDX_ELEMENTS:
            raise IdxFormatError(f"dimensions {dims} overflow")
    if len(data) - header < size:
        raise IdxFormatError(f"payload has {len(data) - header} bytes, header declares {size}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def serialize_idx(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if arr.ndim not in (1, 3):
        raise ValueError("only 1-D label and 3-D image tensors are supported")
    return (bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
            + arr.tobytes())


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


@dataclass(frozen=True)
class MnistSet:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "MnistSet":
        return MnistSet(self.images[index], self.labels[index])


@dataclass(frozen=True)
class SplitSpec:
    train: int = 55000
    validation: int = 5000
    test: int = 10000
    shuffle_seed: int = 0


@dataclass(frozen=True)
class ImbalanceSpec:
    n: int = 0
    keep_probability: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n <= 9:
            raise ValueError("n must lie in 0..9")
        if not 0 < self.keep_probability <= 1:
            raise ValueError("keep_probability must lie in (0, 1]")


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (data_dir / name).exists():
            return data_dir / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def resolve_data_dir(data_dir=None) -> Path:
    data_dir = data_dir or os.environ.get("UAM_DATA_DIR")
    if not data_dir:
        raise FileNotFoundError("no MNIST directory given (use --data-dir or UAM_DATA_DIR)")
    return Path(data_dir)


def load_raw(data_dir):
    """Return ``(train_images, train_labels, test_images, test_labels)`` as uint8 arrays."""
    data_dir = resolve_data_dir(data_dir)
    arrays = {k: read_idx(_find(data_dir, stem)) for k, stem in MNIST_FILES.items()}
    for split in ("train", "test"):
        if len(arrays[f"{split}_images"]) != len(arrays[f"{split}_labels"]):
            raise IdxFormatError(f"{split} images and labels differ in count")
    return (arrays["train_images"], arrays["train_labels"],
            arrays["test_images"], arrays["test_labels"])


def _to_set(images, labels) -> MnistSet:
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return MnistSet(flat, labels.astype(np.int64))


def build_splits(train_raw, test_raw, spec: SplitSpec = SplitSpec()):
    """Shuffle the raw training set into train/validation; scale pixels to [0, 1]."""
    train_images, train_labels = train_raw
    test_images, test_labels = test_raw
    if len(train_labels) != spec.train + spec.validation:
        raise ValueError(f"expected {spec.train + spec.validation} raw training examples, "
                         f"got {len(train_labels)}")
    if len(test_labels) != spec.test:
        raise ValueError(f"expected {spec.test} raw test examples, got {len(test_labels)}")
    order = np.random.default_rng(spec.shuffle_seed).permutation(len(train_labels))
    tr, va = order[:spec.train], order[spec.train:]
    return (_to_set(train_images[tr], train_labels[tr]),
            _to_set(train_images[va], train_labels[va]),
            _to_set(test_images, test_labels))


def load_splits(data_dir=None, spec: SplitSpec = SplitSpec()):
    tri, trl, tei, tel = load_raw(data_dir)
    return build_splits((tri, trl), (tei, tel), spec)


def choose_classes(spec: ImbalanceSpec, num_classes=10):
    rng = np.random.default_rng([spec.seed, spec.n, 0])
    return set(int(c) for c in rng.choice(num_classes, size=spec.n, replace=False))


def apply_imbalance(train: MnistSet, spec: ImbalanceSpec):
    """Thin ``n`` randomly chosen classes to ``keep_probability``.

    Each example of a chosen class survives an independent Bernoulli draw;
    order is preserved. Returns ``(subset, chosen_classes)``.
    """
    chosen = choose_classes(spec)
    if not chosen or spec.keep_probability == 1:
        return train, chosen
    rng = np.random.default_rng([spec.seed, spec.n, 1])
    draws = rng.random(len(train))
    is_chosen = np.isin(train.labels, sorted(chosen))
    keep = ~is_chosen | (draws < spec.keep_probability)
    return train.subset(np.flatnonzero(keep)), chosen


def batch_stream(data: MnistSet, batch_size: int, seed: int):
    """Yield shuffled ``(images, labels)`` batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if len(data) == 0:
        raise ValueError("cannot stream an empty set")
    order = np.random.default_rng(seed).permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield data.images[idx], data.labels[idx]
