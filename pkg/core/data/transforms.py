from typing import Iterator, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.data.loaders import ImageDataset
from core.errors import ConfigError


class NoiseSpec(BaseModel):
    """Additive Gaussian input noise; the mean is fixed at zero."""
    sigma: float = Field(ge=0.0)
    seed: int = 0
    mu: Literal[0.0] = 0.0

    model_config = ConfigDict(frozen=True)

    def __init__(self, sigma: float, seed: int = 0, **data):
        try:
            super().__init__(sigma=sigma, seed=seed, **data)
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(map(str, first["loc"])) or "<spec>"
            raise ConfigError(f"invalid noise spec: {field}: {first['msg']}") from e


def add_gaussian_noise(dataset: ImageDataset, spec: NoiseSpec, rng: Optional[np.random.Generator] = None,
                       clamp: bool = False) -> ImageDataset:
    """Independent N(0, sigma²) per pixel; values leave [0, 1] unless `clamp` is set."""
    if spec.sigma == 0:
        return dataset.with_images(dataset.images.copy())
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    noisy = dataset.images + rng.normal(0.0, spec.sigma, size=dataset.images.shape).astype(dataset.images.dtype)
    if clamp:
        noisy = np.clip(noisy, 0.0, 1.0)
    return dataset.with_images(noisy)


def augment_batch(images: np.ndarray, rng: np.random.Generator, crop_padding: int = 0,
                  flip: bool = False) -> np.ndarray:
    """Random crop after zero padding, then random horizontal flip, per image."""
    out = images
    if crop_padding > 0:
        n, _, h, w = images.shape
        padded = np.pad(images, ((0, 0), (0, 0), (crop_padding, crop_padding), (crop_padding, crop_padding)))
        offsets = rng.integers(0, 2 * crop_padding + 1, size=(n, 2))
        out = np.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets)])
    if flip:
        mask = rng.random(len(out)) < 0.5
        out = out.copy()
        out[mask] = out[mask][..., ::-1]
    return out


def iterate_batches(dataset: ImageDataset, batch_size: int, shuffle: bool = False,
                    rng: Optional[np.random.Generator] = None,
                    drop_last: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ConfigError(f"batch size must be ≥ 1, got {batch_size}")
    order = np.arange(len(dataset))
    if shuffle:
        order = (rng if rng is not None else np.random.default_rng()).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        index = order[start:start + batch_size]
        if drop_last and len(index) < batch_size:
            return
        yield dataset.images[index], dataset.labels[index]


def batch_count(dataset: ImageDataset, batch_size: int, drop_last: bool = False) -> int:
    full, rest = divmod(len(dataset), batch_size)
    return full if drop_last or not rest else full + 1
