from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import yaml

from core.data.loaders import ImageDataset
from core.errors import DataFormatError
from core.utils.seeding import derive_rng

NOISE_SCALE = 0.1
MANIFEST = "manifest.yaml"


def synth_blobs(classes: int, per_class: int, shape: Sequence[int] = (1, 8, 8), separation: float = 3.0,
                seed: int = 0, split: str = "train") -> ImageDataset:
    """Gaussian class clusters in pixel space.

    Each class c has a seeded direction d_c ~ N(0, I); a sample is
    clip(0.5 + 0.1·(separation·d_c + z), 0, 1) with z ~ N(0, I). Class centers
    depend only on `seed`, so train and test splits share them.
    """
    if separation < 0:
        raise DataFormatError(f"separation must be ≥ 0, got {separation}")
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        shape = (1, 1, shape[0])
    centers = derive_rng(seed, "centers").standard_normal((classes, *shape))
    rng = derive_rng(seed, f"samples/{split}")
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(labels.size)]
    z = rng.standard_normal((labels.size, *shape))
    images = np.clip(0.5 + NOISE_SCALE * (separation * centers[labels] + z), 0.0, 1.0).astype(np.float32)
    return ImageDataset(images, labels.astype(np.int64), split, classes)


def synth_splits(classes: int, per_class: int, test_per_class: int, shape: Sequence[int], separation: float,
                 seed: int) -> Tuple[ImageDataset, ImageDataset]:
    return (synth_blobs(classes, per_class, shape, separation, seed, "train"),
            synth_blobs(classes, test_per_class, shape, separation, seed, "test"))


def export_dataset(dataset: ImageDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / f"{dataset.split}_images.npy", dataset.images)
    np.save(directory / f"{dataset.split}_labels.npy", dataset.labels)
    manifest_path = directory / MANIFEST
    manifest = {}
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = yaml.safe_load(f) or {}
    manifest[dataset.split] = {
        "images": f"{dataset.split}_images.npy",
        "labels": f"{dataset.split}_labels.npy",
        "count": len(dataset),
        "shape": list(dataset.image_shape),
        "classes": dataset.classes,
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    return manifest_path


def import_dataset(directory, split: str = "train") -> ImageDataset:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise DataFormatError(f"no {MANIFEST} in {directory}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = yaml.safe_load(f) or {}
    if split not in manifest:
        raise DataFormatError(f"{manifest_path} has no '{split}' split")
    entry = manifest[split]
    images = np.load(directory / entry["images"])
    labels = np.load(directory / entry["labels"])
    if len(images) != entry["count"] or list(images.shape[1:]) != list(entry["shape"]):
        raise DataFormatError(f"{split} tensors do not match the manifest in {directory}")
    return ImageDataset(images.astype(np.float32), labels.astype(np.int64), split, int(entry["classes"]))
