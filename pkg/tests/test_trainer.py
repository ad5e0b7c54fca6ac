"""
Desk-scale training checks on synthetic blobs with 1/16-width networks.
"""
import copy

import numpy as np
import pytest

from core.arch.model import build_model
from core.arch.spec import ModelKind
from core.config.config import OptimizerConfig
from core.data.transforms import NoiseSpec
from core.ensemble.model import ActivationPolicy, PolicyVariant, build_ensemble
from core.ensemble.trainer import (evaluate, evaluate_fixed_subsets, finetune_teacher, teacher_separation,
                                   train_ensemble, train_teacher)
from core.errors import ConfigError, PartitionError, ShapeError
from core.losses import DistillConfig
from core.partition.plan import contiguous_partition

ADAM = OptimizerConfig(name="adam", lr=0.01)
FEATURES = 8


@pytest.fixture
def trained_teacher(blobs, tiny_vgg):
    train, _ = blobs
    teacher = build_model(tiny_vgg(feature_width=FEATURES), seed=0)
    history = train_teacher(teacher, train, epochs=10, batch_size=16, optimizer_cfg=ADAM, seed=0)
    return teacher, history


def make_ensemble(tiny_vgg, n, seed=0, policy=None, alpha=2.0):
    plan = contiguous_partition(FEATURES, n)
    specs = [tiny_vgg(ModelKind.SNN, classes=None, feature_width=size) for size in plan.sizes]
    distill = DistillConfig(alpha=alpha, n_students=n, feature_dim=FEATURES)
    return build_ensemble(specs, plan, 3, seed, distill, policy, timesteps=2)


class TestTeacher:
    def test_learns_blobs(self, trained_teacher, blobs):
        teacher, history = trained_teacher
        assert history[-1].loss < history[0].loss
        assert evaluate(teacher, blobs[1]).accuracy > 0.7

    def test_seeded_runs_are_identical(self, blobs, tiny_vgg):
        states = []
        for _ in range(2):
            teacher = build_model(tiny_vgg(feature_width=FEATURES), seed=5)
            train_teacher(teacher, blobs[0], epochs=2, batch_size=16, optimizer_cfg=ADAM, seed=3)
            states.append(teacher.state_dict())
        assert all(np.array_equal(states[0][k], states[1][k]) for k in states[0])

    def test_cosine_schedule_decays(self, blobs, tiny_vgg):
        teacher = build_model(tiny_vgg(), seed=0)
        cfg = OptimizerConfig(name="sgd", lr=0.05, schedule="cosine")
        history = train_teacher(teacher, blobs[0], epochs=4, batch_size=32, optimizer_cfg=cfg, seed=0)
        assert [m.lr for m in history] == sorted((m.lr for m in history), reverse=True)
        assert history[0].lr == pytest.approx(0.05)


class TestFinetune:
    def test_separation_reaches_two_cluster_optimum(self, trained_teacher, blobs):
        teacher, _ = trained_teacher
        before = teacher_separation(teacher, blobs[1], 2)
        history = finetune_teacher(teacher, blobs[0], n_clusters=2, lambda_=-1.0, epochs=20, batch_size=16,
                                   optimizer_cfg=ADAM, seed=0, eval_set=blobs[1])
        assert history[-1].separation > before
        assert history[-1].separation <= 2.0 + 1e-6
        assert abs(history[-1].separation - 2.0) <= 0.05
        assert history[-1].eval_accuracy is not None

    def test_separation_reaches_four_cluster_optimum(self, trained_teacher, blobs):
        teacher, _ = trained_teacher
        optimum = np.sqrt(8 / 3)
        history = finetune_teacher(teacher, blobs[0], n_clusters=4, lambda_=-1.0, epochs=40, batch_size=16,
                                   optimizer_cfg=ADAM, seed=0, eval_set=blobs[1])
        assert history[-1].separation <= optimum + 1e-6
        assert abs(history[-1].separation - optimum) <= 0.05

    def test_zero_lambda_is_plain_training(self, trained_teacher, blobs):
        teacher, _ = trained_teacher
        history = finetune_teacher(teacher, blobs[0], 2, 0.0, 1, 16, ADAM, seed=0)
        assert history[-1].loss == pytest.approx(history[-1].ce_loss)

    def test_rejects_positive_lambda_and_bad_width(self, trained_teacher, blobs):
        teacher, _ = trained_teacher
        with pytest.raises(ConfigError):
            finetune_teacher(teacher, blobs[0], 2, 0.5, 1, 16, ADAM, seed=0)
        with pytest.raises(PartitionError):
            finetune_teacher(teacher, blobs[0], 3, -0.5, 1, 16, ADAM, seed=0)


class TestEnsembleTraining:
    def test_distillation_reduces_kd_loss(self, trained_teacher, blobs, tiny_vgg):
        teacher, _ = trained_teacher
        model = make_ensemble(tiny_vgg, 2)
        history = train_ensemble(model, teacher, blobs[0], epochs=4, batch_size=16, optimizer_cfg=ADAM, seed=0,
                                 log_grad_norms=True)
        assert history[-1].kd_loss < history[0].kd_loss
        assert history[0].ce_grad_norm > 0 and history[0].kd_grad_norm > 0
        assert not model.training

    def test_zero_alpha_trains_on_cross_entropy_only(self, trained_teacher, blobs, tiny_vgg):
        teacher, _ = trained_teacher
        model = make_ensemble(tiny_vgg, 2, alpha=0.0)
        history = train_ensemble(model, teacher, blobs[0], epochs=2, batch_size=16, optimizer_cfg=ADAM, seed=0)
        for metrics in history:
            assert metrics.kd_loss > 0
            assert metrics.loss == pytest.approx(metrics.ce_loss)

    def test_distillation_does_not_hurt_accuracy(self, trained_teacher, blobs, tiny_vgg):
        teacher, _ = trained_teacher
        accuracy = {}
        for alpha in (0.0, 2.0):
            runs = []
            for seed in range(3):
                model = make_ensemble(tiny_vgg, 2, seed=seed, alpha=alpha)
                train_ensemble(model, teacher, blobs[0], epochs=3, batch_size=16, optimizer_cfg=ADAM, seed=seed)
                runs.append(evaluate(model, blobs[1]).accuracy)
            accuracy[alpha] = np.mean(runs)
        # one test sample of slack
        assert accuracy[2.0] >= accuracy[0.0] - 1 / len(blobs[1])

    def test_seeded_runs_are_identical(self, trained_teacher, blobs, tiny_vgg):
        teacher, _ = trained_teacher
        runs = []
        for _ in range(2):
            model = make_ensemble(tiny_vgg, 2, seed=4)
            history = train_ensemble(model, teacher, blobs[0], epochs=2, batch_size=16, optimizer_cfg=ADAM,
                                     seed=4)
            runs.append(([m.loss for m in history], [m.kd_loss for m in history], model.state_dict()))
        assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
        assert all(np.array_equal(runs[0][2][k], runs[1][2][k]) for k in runs[0][2])

    def test_teacher_width_must_match(self, blobs, tiny_vgg):
        teacher = build_model(tiny_vgg(feature_width=6), seed=0)
        with pytest.raises(ShapeError):
            train_ensemble(make_ensemble(tiny_vgg, 2), teacher, blobs[0], 1, 16, ADAM, seed=0)

    def test_trained_dropout_runs(self, trained_teacher, blobs, tiny_vgg):
        teacher, _ = trained_teacher
        policy = ActivationPolicy(variant=PolicyVariant.TRAINED_DROPOUT, k=1)
        model = make_ensemble(tiny_vgg, 2, policy=policy)
        history = train_ensemble(model, teacher, blobs[0], epochs=1, batch_size=16, optimizer_cfg=ADAM, seed=0)
        assert np.isfinite(history[0].loss)


class TestEvaluation:
    @pytest.fixture
    def ensemble(self, trained_teacher, blobs, tiny_vgg):
        teacher, _ = trained_teacher
        model = make_ensemble(tiny_vgg, 4)
        train_ensemble(model, teacher, blobs[0], epochs=2, batch_size=16, optimizer_cfg=ADAM, seed=0)
        return model

    def test_all_students_equals_stochastic_k_n(self, ensemble, blobs):
        full = evaluate(ensemble, blobs[1])
        stochastic = evaluate(ensemble, blobs[1], ActivationPolicy(variant=PolicyVariant.STOCHASTIC_EVAL, k=4),
                              repeats=3)
        assert stochastic.accuracy == full.accuracy
        assert stochastic.sem == 0.0
        assert stochastic.ledger.ac_ops == full.ledger.ac_ops

    def test_fewer_students_fewer_operations(self, ensemble, blobs):
        results = [evaluate(ensemble, blobs[1], ActivationPolicy(variant=PolicyVariant.STOCHASTIC_EVAL, k=k),
                            repeats=10, batch_size=4, seed=1) for k in (4, 3, 2, 1)]
        macs = [r.ledger.mac_ops for r in results]
        acs = [r.ledger.ac_ops for r in results]
        assert macs == sorted(macs, reverse=True) and len(set(macs)) == 4
        assert acs == sorted(acs, reverse=True) and len(set(acs)) == 4
        sample = 1 / len(blobs[1])
        for more, fewer in zip(results, results[1:]):
            assert fewer.accuracy <= more.accuracy + more.sem + fewer.sem + sample

    def test_stochastic_mean_near_fixed_subsets(self, ensemble, blobs):
        policy = ActivationPolicy(variant=PolicyVariant.STOCHASTIC_EVAL, k=2)
        # one fresh draw per batch of 4 keeps the estimate close to the subset average
        stochastic = evaluate(ensemble, blobs[1], policy, repeats=10, batch_size=4, seed=2)
        subsets = evaluate_fixed_subsets(ensemble, blobs[1], 2)
        assert len(subsets) == 6
        assert abs(stochastic.accuracy - np.mean(list(subsets.values()))) <= max(2 * stochastic.sem, 0.1)

    def test_zero_noise_is_clean(self, ensemble, blobs):
        clean = evaluate(ensemble, blobs[1], seed=0)
        silent = evaluate(ensemble, blobs[1], seed=0, noise=NoiseSpec(0.0))
        assert clean.accuracies == silent.accuracies

    def test_noise_repeats_recorded(self, trained_teacher, blobs):
        teacher, _ = trained_teacher
        noisy = evaluate(teacher, blobs[1], repeats=4, seed=0, noise=NoiseSpec(0.3))
        assert len(noisy.accuracies) == 4
        assert noisy.sigma == 0.3

    def test_accuracy_does_not_rise_with_noise(self, trained_teacher, blobs):
        teacher, _ = trained_teacher
        results = [evaluate(teacher, blobs[1], repeats=10, seed=0, noise=NoiseSpec(sigma))
                   for sigma in (0.0, 0.01, 0.03, 0.05, 0.07)]
        sample = 1 / len(blobs[1])
        for cleaner, noisier in zip(results, results[1:]):
            assert noisier.accuracy <= cleaner.accuracy + cleaner.sem + noisier.sem + sample

    def test_noisy_evaluation_is_seeded(self, trained_teacher, blobs):
        teacher, _ = trained_teacher
        runs = [evaluate(teacher, blobs[1], repeats=5, seed=9, noise=NoiseSpec(0.3)) for _ in range(2)]
        assert runs[0].accuracies == runs[1].accuracies
        assert runs[0].ce_loss == runs[1].ce_loss

    def test_evaluation_leaves_model_untouched(self, ensemble, blobs):
        before = copy.deepcopy(ensemble.state_dict())
        evaluate(ensemble, blobs[1], repeats=2, noise=NoiseSpec(0.05))
        after = ensemble.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_repeats_validated(self, ensemble, blobs):
        with pytest.raises(ConfigError):
            evaluate(ensemble, blobs[1], repeats=0)
