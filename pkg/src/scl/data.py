"""MNIST in IDX format, the synthetic map-fit inputs, and deterministic batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {(d.kind, d.itemsize): code for code, d in _IDX_DTYPES.items()}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError("truncated IDX header", offset=len(raw))
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise FormatError(f"bad IDX magic number 0x{int.from_bytes(raw[:4], 'big'):08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError("truncated IDX dimension list", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    body = len(raw) - header_end
    if body < expected:
        raise FormatError(
            f"IDX body holds {body} bytes but dimensions {dims} need {expected}", offset=len(raw)
        )
    if body > expected:
        raise FormatError(f"{body - expected} trailing bytes after IDX body", offset=header_end + expected)
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def serialize_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _IDX_CODES.get((array.dtype.kind, array.dtype.itemsize))
    if code is None:
        raise ContractError(f"dtype {array.dtype} has no IDX encoding")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.astype(_IDX_DTYPES[code], copy=False).tobytes()


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


@dataclass
class Dataset:
    x: np.ndarray  # N×784 float32, standardized
    y: np.ndarray  # N int64
    mean: float
    std: float

    def __len__(self):
        return len(self.y)

    def raw_pixels(self):
        """Undo the standardization, giving pixels in [0, 1]."""
        return self.x.astype(np.float64) * self.std + self.mean


@dataclass
class MNIST:
    train: Dataset
    test: Dataset


def load_mnist_idx(images_path, labels_path, mean=None, std=None) -> Dataset:
    """Load one MNIST split, flatten, scale to [0, 1] and standardize.

    With ``mean``/``std`` omitted the statistics are computed from this split.
    """
    images = _read_checked(images_path, IMAGES_MAGIC)
    labels = _read_checked(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4
        )
    pixels = images.reshape(len(images), -1).astype(np.float64) / 255.0
    if mean is None:
        mean = float(pixels.mean())
    if std is None:
        std = float(pixels.std())
    x = ((pixels - mean) / std).astype(np.float32)
    return Dataset(x, labels.astype(np.int64), mean, std)


def _read_checked(path, magic) -> np.ndarray:
    raw = _read_bytes(path)
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise FormatError(f"{path}: magic number {found:#010x}, expected {magic:#010x}", offset=0)
    return parse_idx(raw)


def _find(root: Path, name: str) -> Path:
    for candidate in (root / name, root / (name + ".gz"), root / name.replace("-idx", ".idx")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"MNIST file {name} not found under {root}")


def default_data_dir() -> Path:
    return Path(os.environ.get("SCL_DATA_DIR", "/root/data/mnist"))


def load_mnist(root=None) -> MNIST:
    """Both splits; the test split is standardized with training statistics."""
    root = Path(root) if root is not None else default_data_dir()
    train = load_mnist_idx(*(_find(root, n) for n in MNIST_FILES["train"]))
    test = load_mnist_idx(*(_find(root, n) for n in MNIST_FILES["test"]), mean=train.mean, std=train.std)
    return MNIST(train, test)


def gen_mapping_inputs(n, dim=64, seed=0) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal((n, dim)).astype(np.float32)


def epoch_permutation(n, seed, epoch) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(x, y, batch_size=64, seed=0, epoch=0, shuffle=True):
    """Yield ``(x_batch, y_batch)``; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = len(x)
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]
