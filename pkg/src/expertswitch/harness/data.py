"""IDX (MNIST distribution format) readers."""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Raw unsigned-byte IDX array (gzip accepted)."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: only unsigned-byte IDX files are supported (magic 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) - header != count:
        raise FormatError(f"{path}: expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def normalize(images: np.ndarray) -> np.ndarray:
    return ((images.astype(np.float32) / 255.0 - MNIST_MEAN) / MNIST_STD).astype(np.float32)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as normalised float32 (N, 1, H, W) and int64 labels."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3-d image array, got {images.ndim}-d")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected 1-d label array")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return normalize(images)[:, None], labels.astype(np.int64)


def find_file(data_dir, name: str) -> Path:
    data_dir = Path(data_dir)
    candidates = [name, name + ".gz", name.replace("-idx", ".idx"), name.replace("-idx", ".idx") + ".gz"]
    for c in candidates:
        if (data_dir / c).exists():
            return data_dir / c
    raise FileNotFoundError(f"no {name}[.gz] in {data_dir}")


def load_mnist(data_dir, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    images, labels = MNIST_FILES[split]
    return load_idx(find_file(data_dir, images), find_file(data_dir, labels))
