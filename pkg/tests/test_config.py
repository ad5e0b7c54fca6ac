import pytest

from core.arch.model import count_parameters
from core.arch.spec import ModelKind
from core.config.config import DESK_MAX_TEST, DESK_MAX_TRAIN, DESK_WIDTH_MULTIPLIER, ExperimentConfig
from core.config.config_load import DATA_DIR_ENV, config_load, parse_config, resolve_data_path
from core.ensemble.model import PolicyVariant
from core.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "experiment.yaml"
    path.write_text(text, encoding="utf-8")
    return path


class TestParsing:
    def test_defaults_from_empty_file(self, tmp_path):
        loaded = config_load(write(tmp_path, ""))
        assert loaded.config == ExperimentConfig()
        assert loaded.raw_text == ""

    def test_aliases(self):
        config = parse_config("disentangle: {lambda: -0.5}\nensemble: {T: 6, n_students: 3, k_active: 2,"
                              " policy: stochastic_eval}\n").config
        assert config.disentangle.lambda_ == -0.5
        assert config.ensemble.timesteps == 6
        policy = config.ensemble.activation_policy()
        assert policy.variant == PolicyVariant.STOCHASTIC_EVAL and policy.k == 2

    @pytest.mark.parametrize("text", [
        "disentangle: {lambda: 0.3}",
        "disentangle: {epochs: 101}",
        "ensemble: {n_students: 2, k_active: 3}",
        "eval: {noise_sigmas: [0.0, -0.01]}",
        "schema_version: 2",
        "dataset: {name: imagenet}",
        "teacher: {optimizer: {lr: 0}}",
        "- just\n- a list",
        "teacher: [unclosed",
    ])
    def test_invalid_configs(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            config_load(tmp_path / "absent.yaml")

    def test_error_names_the_field(self):
        with pytest.raises(ConfigError, match="ensemble"):
            parse_config("ensemble: {alpha: -1}")


class TestOverrides:
    def test_seed_and_scale_overrides_keep_raw_text(self, tmp_path):
        text = "seed: 3\ndataset: {desk_scale: true}\n"
        loaded = config_load(write(tmp_path, text), seed=11, desk_scale=False)
        assert loaded.config.seed == 11
        assert loaded.config.dataset.desk_scale is False
        assert loaded.raw_text == text

    def test_desk_limits(self):
        desk = parse_config("dataset: {desk_scale: true}").config.dataset
        full = parse_config("dataset: {desk_scale: false}").config.dataset
        assert (desk.train_limit, desk.test_limit) == (DESK_MAX_TRAIN, DESK_MAX_TEST)
        assert (full.train_limit, full.test_limit) == (None, None)
        assert desk.width_multiplier == DESK_WIDTH_MULTIPLIER and full.width_multiplier == 1.0

    def test_explicit_multiplier_wins_over_desk(self):
        config = parse_config("teacher: {arch: {family: vgg, depth: 5, width_multiplier: 0.0625,"
                              " feature_width: 8}}").config
        narrow = config.teacher_spec(3, (1, 8, 8))
        default = parse_config("teacher: {arch: {family: vgg, depth: 5, feature_width: 8}}").config
        assert count_parameters(narrow) < count_parameters(default.teacher_spec(3, (1, 8, 8)))
        assert narrow.kind == ModelKind.ANN and narrow.classes == 3

    def test_student_spec_has_no_head(self):
        spec = ExperimentConfig().student_spec((1, 8, 8), feature_width=4)
        assert spec.kind == ModelKind.SNN
        assert spec.classes is None
        assert spec.feature_dim == 4


class TestDataPath:
    def test_synthetic_needs_no_path(self):
        assert resolve_data_path(ExperimentConfig()) is None

    def test_environment_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path))
        config = parse_config("dataset: {name: cifar10}").config
        assert resolve_data_path(config) == tmp_path

    def test_explicit_path_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv(DATA_DIR_ENV, "/nonexistent")
        config = parse_config(f"dataset: {{name: mnist, path: '{tmp_path}'}}").config
        assert resolve_data_path(config) == tmp_path

    def test_missing_path(self, monkeypatch):
        monkeypatch.delenv(DATA_DIR_ENV, raising=False)
        with pytest.raises(ConfigError):
            resolve_data_path(parse_config("dataset: {name: cifar10}").config)
