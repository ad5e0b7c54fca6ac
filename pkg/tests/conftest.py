import numpy as np
import pytest

from core.arch.spec import ModelKind, vgg_spec
from core.data.synthetic import synth_splits
from core.utils.logging import set_quiet


@pytest.fixture(autouse=True)
def quiet():
    """Keep training loops from printing progress during tests."""
    set_quiet(True)
    yield
    set_quiet(False)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def blobs():
    """Three well separated classes of 8×8 single-channel images."""
    return synth_splits(classes=3, per_class=24, test_per_class=12, shape=(1, 8, 8), separation=4.0, seed=7)


@pytest.fixture
def tiny_vgg():
    """Factory for VGG5 at 1/16 width on 8×8 inputs: conv widths 4, 8, 16, 32."""
    def make(kind=ModelKind.ANN, classes=3, feature_width=None, width_scale="full"):
        return vgg_spec(5, width_scale, kind, classes, width_multiplier=1 / 16, input_size=8, in_channels=1,
                        feature_width=feature_width)
    return make
