"""Dataset ingestion: MNIST IDX files and seeded synthetic class blobs."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

DATA_ENV = "BAYESBITS_DATA_DIR"
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.x[:n], self.y[:n])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        idx = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(idx), batch_size):
            j = idx[i:i + batch_size]
            yield self.x[j], self.y[j]


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(raw: bytes, expected_magic: Optional[int] = None) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into a uint8 array."""
    if len(raw) < 4:
        raise DataFormatError("file too short for IDX magic", len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    magic = struct.unpack(">I", raw[:4])[0]
    if zero != 0 or dtype_code != 0x08:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}", 0)
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(f"expected magic 0x{expected_magic:08x}, got 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("truncated IDX dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) < header + count:
        raise DataFormatError(f"truncated IDX payload: need {count} bytes", len(raw))
    if len(raw) > header + count:
        raise DataFormatError("trailing bytes after IDX payload", header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_magic)


_SPLITS = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
           "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / "data" / "mnist"))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem} not found in {directory}")


def load_mnist_idx(images_path, labels_path, limit: Optional[int] = None) -> Dataset:
    """Images scaled to [0, 1] with shape (N, 1, 28, 28); labels int64 in [0, 9]."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3:
        raise DataFormatError(f"image file must have 3 dimensions, got {images.ndim}", 3)
    if labels.ndim != 1:
        raise DataFormatError(f"label file must have 1 dimension, got {labels.ndim}", 3)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels", 4)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"label {labels[bad]} outside [0, 9]", 8 + bad)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.astype(np.float64)[:, None] / 255.0
    return Dataset(x, labels.astype(np.int64))


def load_mnist(directory=None, split: str = "train", limit: Optional[int] = None) -> Dataset:
    directory = Path(directory) if directory else default_data_dir()
    img, lab = _SPLITS[split]
    return load_mnist_idx(_find(directory, img), _find(directory, lab), limit)


NORMALIZATIONS = ("none", "standardize", "scale")


def normalize(train: Dataset, *others: Dataset, kind: str = "none") -> Tuple[Dataset, ...]:
    """Apply one normalization to every split using statistics of ``train``.

    ``standardize`` subtracts the mean and divides by the standard deviation;
    ``scale`` only divides, so non-negative pixels stay non-negative.
    """
    if kind not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    if kind == "none":
        return (train,) + others
    mean = float(train.x.mean()) if kind == "standardize" else 0.0
    std = float(train.x.std()) or 1.0
    return tuple(Dataset((d.x - mean) / std, d.y) for d in (train,) + others)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (used to build fixtures)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def synth_dataset(seed: int, n: int, classes: int, dim: int = 16, margin: float = 3.0) -> Dataset:
    """Gaussian class blobs: unit-variance noise around means ``margin`` apart in direction.

    Class means are ``margin`` times orthonormal directions (dim >= classes), so
    margin 0 gives chance-level data and large margins are linearly separable.
    """
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    if dim < classes:
        raise ValueError("dim must be at least the number of classes")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(dim, classes)))
    means = margin * basis.T
    y = np.arange(n) % classes
    rng.shuffle(y)
    x = means[y] + rng.normal(size=(n, dim))
    return Dataset(x, y.astype(np.int64))
