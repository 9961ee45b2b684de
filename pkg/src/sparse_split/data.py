"""MNIST ingestion from IDX files and deterministic minibatching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import BadDimensions, BadMagic, CountMismatch, DataError, TargetTooSmall, TruncatedFile
from .topology import derive_seed

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
PIXELS = 28 * 28
DEFAULT_WIDTH = 800
DATA_ENV = "SPARSE_SPLIT_DATA"

_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True, eq=False)
class RawMnist:
    images: np.ndarray  # uint8, n x 28 x 28
    labels: np.ndarray  # uint8, n


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # float32, n x width
    labels: np.ndarray  # int64, n
    split_tag: str = "train"

    def __len__(self):
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.images.shape[1]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split_tag)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise TruncatedFile(f"{path}: corrupt gzip stream ({exc})") from None
    return data


def _parse_idx(data: bytes, magic: int, ndim: int, path) -> tuple[np.ndarray, tuple[int, ...]]:
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise TruncatedFile(f"{path}: {len(data)} bytes is shorter than the IDX header")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    size = int(np.prod(dims))
    if len(data) < header_len + size:
        raise TruncatedFile(f"{path}: expected {size} payload bytes, found {len(data) - header_len}")
    arr = np.frombuffer(data, dtype=np.uint8, count=size, offset=header_len)
    return arr.reshape(dims), dims


def load_idx(images_path, labels_path) -> RawMnist:
    """Read an IDX image/label file pair (plain or gzip-compressed)."""
    images, dims = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, images_path)
    if dims[1:] != (28, 28):
        raise BadDimensions(f"{images_path}: images are {dims[1]}x{dims[2]}, expected 28x28")
    labels, _ = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, labels_path)
    if len(labels) != len(images):
        raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    return RawMnist(images, labels)


def pad_to_width(features: np.ndarray, target_width: int) -> np.ndarray:
    """Zero-pad rows on the right up to ``target_width`` columns."""
    n, width = features.shape
    if target_width < width:
        raise TargetTooSmall(f"target width {target_width} < feature width {width}")
    if target_width == width:
        return features
    out = np.zeros((n, target_width), dtype=features.dtype)
    out[:, :width] = features
    return out


def preprocess(raw: RawMnist, target_width: int = DEFAULT_WIDTH, split_tag: str = "train") -> Dataset:
    """Scale pixels into [0, 1], flatten row-major, zero-pad to ``target_width``."""
    if target_width < PIXELS:
        raise TargetTooSmall(f"target width {target_width} < {PIXELS} pixels")
    flat = raw.images.reshape(len(raw.images), PIXELS).astype(np.float32) / np.float32(255.0)
    labels = raw.labels.astype(np.int64)
    if len(labels) and labels.max() >= 10:
        raise DataError(f"label {labels.max()} outside [0, 10)")
    return Dataset(pad_to_width(flat, target_width), labels, split_tag)


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir:
        return Path(data_dir)
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    raise DataError(f"no data directory given (use --data-dir or set {DATA_ENV})")


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    # torchvision / some mirrors use a dot before idx
    alt = stem.replace("-idx", ".idx")
    for name in (alt, alt + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise DataError(f"{stem}[.gz] not found in {directory}")


def load_mnist(data_dir=None, split: str = "train", target_width: int = DEFAULT_WIDTH) -> Dataset:
    directory = resolve_data_dir(data_dir)
    images_name, labels_name = _FILES[split]
    raw = load_idx(_find(directory, images_name), _find(directory, labels_name))
    return preprocess(raw, target_width, split)


def epoch_permutation(n: int, seed: int, epoch_index: Optional[int]) -> np.ndarray:
    if epoch_index is None:
        return np.arange(n)
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 3, epoch_index)))
    return rng.permutation(n)


def batches(
    dataset: Dataset, batch_size: int, seed: int, epoch_index: Optional[int] = 0
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` chunks in the order fixed by ``(seed, epoch_index)``.

    ``epoch_index=None`` keeps the stored order.  The final short chunk is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_permutation(len(dataset), seed, epoch_index)
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
