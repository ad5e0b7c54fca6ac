"""
Readers for the CIFAR-10 binary and MNIST IDX formats.

CIFAR-10 record: 1 label byte followed by 1024 R, 1024 G and 1024 B bytes of a
row-major 32×32 image. IDX: big-endian magic (0x00000803 images, 0x00000801
labels), one big-endian uint32 per dimension, then raw uint8 data. Gzipped IDX
files are read transparently.
"""
import gzip
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from core.errors import DataFormatError

CIFAR_RECORD_BYTES = 3073
CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [M×C×H×W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataFormatError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, limit: Optional[int]) -> "ImageDataset":
        if limit is None or limit >= len(self):
            return self
        return ImageDataset(self.images[:limit], self.labels[:limit], self.split, self.classes)

    def with_images(self, images: np.ndarray) -> "ImageDataset":
        return ImageDataset(images, self.labels, self.split, self.classes)


def _read_cifar_file(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
        complete = raw.size // CIFAR_RECORD_BYTES
        raise DataFormatError(f"{path.name}: truncated record at byte offset {complete * CIFAR_RECORD_BYTES} "
                              f"(file size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES})")
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{path.name}: label byte {labels[bad[0]]} > 9 at byte offset "
                              f"{int(bad[0]) * CIFAR_RECORD_BYTES}")
    images = records[:, 1:].reshape(-1, *CIFAR_IMAGE_SHAPE).astype(np.float32) / 255.0
    return images, labels


def _cifar_root(directory: Path) -> Path:
    nested = directory / "cifar-10-batches-bin"
    return nested if nested.is_dir() else directory


def load_cifar10_bin(directory) -> Tuple[ImageDataset, ImageDataset]:
    root = _cifar_root(Path(directory))
    splits = []
    for split, names in (("train", CIFAR_TRAIN_FILES), ("test", CIFAR_TEST_FILES)):
        missing = [n for n in names if not (root / n).exists()]
        if missing:
            raise DataFormatError(f"CIFAR-10 files missing in {root}: {', '.join(missing)}")
        parts = [_read_cifar_file(root / n) for n in names]
        splits.append(ImageDataset(np.concatenate([p[0] for p in parts]),
                                   np.concatenate([p[1] for p in parts]), split, classes=10))
    return splits[0], splits[1]


def _open_idx(path: Path) -> bytes:
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path: Path, magic: int) -> np.ndarray:
    data = _open_idx(path)
    if len(data) < 4:
        raise DataFormatError(f"{path.name}: file too short for an IDX header")
    found = int.from_bytes(data[:4], "big")
    if found != magic:
        raise DataFormatError(f"{path.name}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"{path.name}: truncated IDX header at byte offset {len(data)}")
    dims = [int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4)]
    expected = int(np.prod(dims))
    if len(data) - header != expected:
        raise DataFormatError(f"{path.name}: expected {expected} data bytes after byte offset {header}, "
                              f"found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def _idx_path(root: Path, name: str) -> Path:
    for candidate in (root / name, root / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataFormatError(f"MNIST file {name} missing in {root}")


def load_mnist_idx(directory) -> Tuple[ImageDataset, ImageDataset]:
    root = Path(directory)
    splits: List[ImageDataset] = []
    for split, (image_name, label_name) in MNIST_FILES.items():
        images = read_idx(_idx_path(root, image_name), IDX_IMAGES_MAGIC)
        labels = read_idx(_idx_path(root, label_name), IDX_LABELS_MAGIC).astype(np.int64)
        if len(images) != len(labels):
            raise DataFormatError(f"MNIST {split}: {len(images)} images but {len(labels)} labels")
        images = images.astype(np.float32)[:, None, :, :] / 255.0
        splits.append(ImageDataset(images, labels, split, classes=10))
    return splits[0], splits[1]
