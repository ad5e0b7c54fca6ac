import numpy as np
import pytest

from core.arch.model import build_model, count_parameters, forward, forward_features
from core.arch.spec import BlockType, ModelKind, resnet_spec, vgg_spec, walk
from core.autodiff.tensor import no_grad
from core.energy import count_macs
from core.errors import CheckpointError, ConfigError, ShapeError


def within(value, target, tolerance):
    return abs(value - target) <= tolerance * target


class TestStaticCounts:
    """Full-scale CIFAR-10 networks against their published sizes."""

    @pytest.mark.parametrize("spec,millions", [
        (lambda: vgg_spec(19), 20.0),
        (lambda: vgg_spec(11), 9.3),
        (lambda: resnet_spec(18), 11.3),
    ])
    def test_parameter_counts(self, spec, millions):
        assert within(count_parameters(spec()), millions * 1e6, 0.02)

    def test_resnet18_macs(self):
        assert within(sum(count_macs(resnet_spec(18)).values()), 555e6, 0.05)

    def test_vgg19_macs(self):
        assert within(sum(count_macs(vgg_spec(19)).values()), 398e6, 0.05)

    def test_mini_is_smaller(self):
        assert count_parameters(vgg_spec(5, "mini")) < count_parameters(vgg_spec(5))
        assert count_parameters(resnet_spec(10, base_channels=54)) < count_parameters(resnet_spec(10))

    def test_unknown_depth(self):
        with pytest.raises(ConfigError):
            vgg_spec(7)
        with pytest.raises(ConfigError):
            resnet_spec(34)


class TestShapes:
    def test_tiny_vgg_walk(self, tiny_vgg):
        spec = tiny_vgg()
        convs = [s.out_shape for s in walk(spec) if s.block.type == BlockType.CONV]
        assert convs == [(4, 8, 8), (8, 4, 4), (16, 2, 2), (32, 1, 1)]
        assert spec.feature_dim == 32

    def test_feature_projection_sets_width(self, tiny_vgg):
        assert tiny_vgg(feature_width=12).feature_dim == 12

    def test_ann_forward(self, tiny_vgg, rng):
        model = build_model(tiny_vgg(feature_width=6), seed=0)
        features, logits = forward(model, rng.uniform(size=(5, 1, 8, 8)).astype(np.float32))
        assert features.shape == (5, 6)
        assert logits.shape == (5, 3)

    def test_snn_rates_are_multiples_of_one_over_t(self, tiny_vgg, rng):
        model = build_model(tiny_vgg(ModelKind.SNN, classes=None, feature_width=6), seed=0, timesteps=4)
        with no_grad():
            rates = forward_features(model, rng.uniform(size=(3, 1, 8, 8)).astype(np.float32)).values
        assert rates.shape == (3, 6)
        np.testing.assert_allclose(rates * 4, np.round(rates * 4), atol=1e-6)
        assert rates.min() >= 0.0 and rates.max() <= 1.0

    def test_student_has_no_head(self, tiny_vgg):
        model = build_model(tiny_vgg(ModelKind.SNN, classes=None), seed=0)
        with pytest.raises(ShapeError):
            forward(model, np.zeros((1, 1, 8, 8), dtype=np.float32))

    def test_wrong_input_shape(self, tiny_vgg):
        model = build_model(tiny_vgg(), seed=0)
        with pytest.raises(ShapeError):
            forward_features(model, np.zeros((2, 3, 8, 8), dtype=np.float32))

    def test_small_resnet_with_projections(self, rng):
        spec = resnet_spec(10, base_channels=4, input_size=8, in_channels=1, classes=2)
        assert any(s.projection is not None for s in walk(spec))
        model = build_model(spec, seed=1)
        features, logits = forward(model, rng.uniform(size=(2, 1, 8, 8)).astype(np.float32))
        assert features.shape == (2, 32)
        assert logits.shape == (2, 2)
        assert any(name.startswith("proj") for name, _ in model.named_parameters())


class TestState:
    def test_seeded_build_is_reproducible(self, tiny_vgg):
        a = build_model(tiny_vgg(), seed=3).state_dict()
        b = build_model(tiny_vgg(), seed=3).state_dict()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_state_dict_round_trip(self, tiny_vgg, rng):
        source = build_model(tiny_vgg(), seed=1)
        target = build_model(tiny_vgg(), seed=2)
        target.load_state_dict(source.state_dict())
        images = rng.uniform(size=(2, 1, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(forward(source, images)[1].values, forward(target, images)[1].values)

    def test_state_dict_includes_norm_buffers(self, tiny_vgg):
        state = build_model(tiny_vgg(), seed=0).state_dict()
        assert any("running_mean" in key for key in state)

    def test_mismatched_state_rejected(self, tiny_vgg):
        state = build_model(tiny_vgg(feature_width=6), seed=0).state_dict()
        with pytest.raises(CheckpointError):
            build_model(tiny_vgg(), seed=0).load_state_dict(state)
