"""Readers for the MNIST IDX and CIFAR-10 binary formats."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise DatasetFormatError(f"{what}: truncated at offset 0 (need 4-byte magic, file has {len(raw)} bytes)")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise DatasetFormatError(f"{what}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{what}: truncated header at offset {len(raw)}, need {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise DatasetFormatError(
            f"{what}: truncated payload at offset {len(raw)}, expected {header + size} bytes for dims {dims}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def parse_idx_images(raw: bytes) -> np.ndarray:
    return _parse_idx(raw, IDX_IMAGES_MAGIC, 3, "IDX images")


def parse_idx_labels(raw: bytes) -> np.ndarray:
    return _parse_idx(raw, IDX_LABELS_MAGIC, 1, "IDX labels")


def load_mnist_idx(images_path, labels_path, dtype=np.float32) -> Dataset:
    """Images become ``(N, 28, 28, 1)`` arrays scaled to [0, 1]."""
    imgs = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if len(imgs) != len(labels):
        raise DatasetFormatError(f"count mismatch: {len(imgs)} images vs {len(labels)} labels")
    return Dataset((imgs.astype(dtype) / 255)[..., None], labels.astype(np.int64))


def load_cifar_bin(path, dtype=np.float32) -> Dataset:
    """CIFAR-10 binary batch: records of one label byte then R, G, B planes."""
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(f"CIFAR file length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DatasetFormatError(f"label {labels[i]} > 9 in record {i} (offset {i * CIFAR_RECORD})")
    imgs = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(imgs.astype(dtype) / 255, labels)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def mnist_dir() -> Path:
    return Path(os.environ.get("LIPNEXT_MNIST_DIR", "/root/data/mnist"))


def load_mnist_split(root, split: str) -> Dataset:
    root = Path(root)
    names = MNIST_FILES[split]
    paths = []
    for name in names:
        cands = [root / name, root / (name + ".gz"), root / name.replace("-idx", ".idx")]
        found = next((p for p in cands if p.exists()), None)
        if found is None:
            raise FileNotFoundError(f"missing MNIST file {name} under {root}")
        paths.append(found)
    return load_mnist_idx(*paths)


def load_dataset(kind: str, path) -> Dataset:
    """``kind`` is ``mnist`` (``path`` = ``dir`` or ``dir:split``) or ``cifar`` (one .bin file)."""
    if kind == "mnist":
        s = str(path)
        split = "train"
        if ":" in s and s.rsplit(":", 1)[1] in MNIST_FILES:
            s, split = s.rsplit(":", 1)
        if not Path(s).is_dir():
            raise FileNotFoundError(f"MNIST directory not found: {s}")
        return load_mnist_split(s, split)
    if kind == "cifar":
        return load_cifar_bin(path)
    raise ValueError(f"unknown dataset kind {kind!r}")
