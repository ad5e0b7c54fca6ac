import gzip

import numpy as np
import pytest
from pydantic import ValidationError
from sklearn.linear_model import LogisticRegression

from core.data.loaders import (CIFAR_RECORD_BYTES, CIFAR_TEST_FILES, CIFAR_TRAIN_FILES, IDX_IMAGES_MAGIC,
                               ImageDataset, load_cifar10_bin, load_mnist_idx, read_idx)
from core.data.synthetic import export_dataset, import_dataset, synth_blobs, synth_splits
from core.data.transforms import NoiseSpec, add_gaussian_noise, augment_batch, batch_count, iterate_batches
from core.errors import ConfigError, DataFormatError


def cifar_record(label, offset):
    pixels = (np.arange(3072) + offset) % 256
    return bytes([label]) + bytes(pixels.astype(np.uint8))


def idx_bytes(magic, array):
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    return header + array.astype(np.uint8).tobytes()


@pytest.fixture
def cifar_dir(tmp_path):
    for name in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES:
        (tmp_path / name).write_bytes(cifar_record(3, 0) + cifar_record(9, 7))
    return tmp_path


@pytest.fixture
def mnist_dir(tmp_path):
    image = np.array([[[0, 255], [51, 102]]])
    (tmp_path / "train-images-idx3-ubyte").write_bytes(idx_bytes(IDX_IMAGES_MAGIC, image))
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(idx_bytes(0x00000801, np.array([7])))
    (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(gzip.compress(idx_bytes(IDX_IMAGES_MAGIC, image)))
    (tmp_path / "t10k-labels-idx1-ubyte.gz").write_bytes(gzip.compress(idx_bytes(0x00000801, np.array([2]))))
    return tmp_path


class TestCifarLoader:
    def test_records_decode(self, cifar_dir):
        train, test = load_cifar10_bin(cifar_dir)
        assert len(train) == 10 and len(test) == 2
        assert train.images.shape[1:] == (3, 32, 32)
        np.testing.assert_array_equal(test.labels, [3, 9])
        # channel planes are stored R, G, B; each row-major
        assert test.images[0, 0, 0, 1] == pytest.approx(1 / 255)
        assert test.images[0, 1, 0, 0] == pytest.approx((1024 % 256) / 255)
        assert test.images[1, 2, 31, 31] == pytest.approx(((3071 + 7) % 256) / 255)

    def test_truncated_file(self, cifar_dir):
        path = cifar_dir / CIFAR_TEST_FILES[0]
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DataFormatError, match=f"byte offset {CIFAR_RECORD_BYTES}"):
            load_cifar10_bin(cifar_dir)

    def test_bad_label(self, cifar_dir):
        (cifar_dir / CIFAR_TEST_FILES[0]).write_bytes(cifar_record(12, 0))
        with pytest.raises(DataFormatError):
            load_cifar10_bin(cifar_dir)

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_cifar10_bin(tmp_path)


class TestMnistLoader:
    def test_plain_and_gzipped(self, mnist_dir):
        train, test = load_mnist_idx(mnist_dir)
        assert train.images.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(train.images[0, 0], [[0.0, 1.0], [0.2, 0.4]], rtol=1e-6)
        assert train.labels.tolist() == [7]
        assert test.labels.tolist() == [2]

    def test_bad_magic(self, mnist_dir):
        with pytest.raises(DataFormatError, match="bad magic"):
            read_idx(mnist_dir / "train-labels-idx1-ubyte", IDX_IMAGES_MAGIC)

    def test_truncated_payload(self, mnist_dir):
        path = mnist_dir / "train-images-idx3-ubyte"
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(DataFormatError):
            load_mnist_idx(mnist_dir)


class TestSynthetic:
    def test_shapes_and_balance(self):
        data = synth_blobs(4, 10, (1, 8, 8), seed=0)
        assert data.images.shape == (40, 1, 8, 8)
        assert np.bincount(data.labels).tolist() == [10] * 4
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0

    def test_seeded(self):
        a, b = synth_blobs(3, 5, seed=11), synth_blobs(3, 5, seed=11)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_linearly_separable(self):
        train, test = synth_splits(4, 100, 50, (1, 8, 8), separation=5.0, seed=3)
        classifier = LogisticRegression(max_iter=1000).fit(train.images.reshape(len(train), -1), train.labels)
        assert classifier.score(test.images.reshape(len(test), -1), test.labels) > 0.95

    def test_export_import(self, tmp_path):
        train, test = synth_splits(2, 4, 2, (1, 4, 4), 3.0, seed=1)
        export_dataset(train, tmp_path)
        export_dataset(test, tmp_path)
        loaded = import_dataset(tmp_path, "test")
        np.testing.assert_array_equal(loaded.images, test.images)
        np.testing.assert_array_equal(loaded.labels, test.labels)
        with pytest.raises(DataFormatError):
            import_dataset(tmp_path, "validation")

    def test_dataset_validates_labels(self):
        with pytest.raises(DataFormatError):
            ImageDataset(np.zeros((2, 1, 2, 2)), np.array([0, 5]), classes=3)


class TestNoise:
    def test_empirical_moments(self):
        data = ImageDataset(np.zeros((100, 1, 10, 10), dtype=np.float32), np.zeros(100, dtype=np.int64))
        sigma = 0.05
        noise = add_gaussian_noise(data, NoiseSpec(sigma), np.random.default_rng(0)).images
        assert noise.std() == pytest.approx(sigma, rel=0.02)
        assert abs(noise.mean()) < 3 * sigma / np.sqrt(noise.size)

    def test_zero_sigma_is_identity(self):
        data = synth_blobs(2, 5, seed=0)
        noisy = add_gaussian_noise(data, NoiseSpec(0.0))
        np.testing.assert_array_equal(noisy.images, data.images)
        assert noisy.images is not data.images

    def test_clamp(self):
        data = synth_blobs(2, 5, seed=0)
        noisy = add_gaussian_noise(data, NoiseSpec(0.5, seed=1), clamp=True)
        assert noisy.images.min() >= 0.0 and noisy.images.max() <= 1.0

    def test_invalid_spec(self):
        with pytest.raises(ConfigError, match="sigma"):
            NoiseSpec(-0.1)
        with pytest.raises(ConfigError, match="mu"):
            NoiseSpec(0.1, mu=0.5)

    def test_spec_is_frozen(self):
        spec = NoiseSpec(0.1, seed=3)
        with pytest.raises(ValidationError):
            spec.sigma = 0.2
        assert spec == NoiseSpec(0.1, seed=3)


class TestBatching:
    def test_every_sample_once(self, rng):
        data = synth_blobs(2, 5, seed=0)
        seen = np.concatenate([labels for _, labels in iterate_batches(data, 3, shuffle=True, rng=rng)])
        assert sorted(seen.tolist()) == sorted(data.labels.tolist())
        assert batch_count(data, 3) == 4
        assert batch_count(data, 3, drop_last=True) == 3
        assert len(list(iterate_batches(data, 3, drop_last=True))) == 3

    def test_augment_keeps_shape(self, rng):
        images = rng.uniform(size=(4, 1, 6, 6)).astype(np.float32)
        assert augment_batch(images, rng, crop_padding=2, flip=True).shape == images.shape

    def test_flip_only_mirrors(self):
        images = np.arange(4, dtype=np.float32).reshape(1, 1, 1, 4)
        flipped = augment_batch(images, np.random.default_rng(0), flip=True)
        assert flipped[0, 0, 0].tolist() in ([0, 1, 2, 3], [3, 2, 1, 0])
