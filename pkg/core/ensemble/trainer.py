"""
Training and evaluation loops for the ANN teacher and the spiking ensemble.

All three trainers share `_run_epochs`, which owns batching, augmentation, the
learning-rate schedule, progress display and metric averaging; each trainer only
supplies the per-batch step.
"""
import math
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.progress import Progress

from core.arch.model import ModelInstance, forward, forward_features
from core.autodiff.optim import Optimizer, build_optimizer, scheduled_lr
from core.autodiff.tensor import Tensor, no_grad
from core.data.loaders import ImageDataset
from core.data.transforms import NoiseSpec, add_gaussian_noise, augment_batch, batch_count, iterate_batches
from core.energy import EnergyLedger, average_ledgers, build_ledger
from core.ensemble.model import (ActivationPolicy, EnsembleModel, PolicyVariant, ensemble_forward,
                                 sample_active_set)
from core.errors import ConfigError, PartitionError, ShapeError
from core.losses import (ce_loss, kd_loss_ensemble, pairwise_separation, sim_loss, student_total_loss,
                         teacher_finetune_loss)
from core.snn.lif import SpikeMode
from core.utils.logging import is_quiet, metric
from core.utils.seeding import DROPOUT, NOISE, SHUFFLE, derive_rng

StepFn = Callable[[np.ndarray, np.ndarray, bool], Dict[str, float]]


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float = 0.0
    ce_loss: float = 0.0
    kd_loss: float = 0.0
    sim_loss: float = 0.0
    train_accuracy: float = 0.0
    separation: Optional[float] = None
    eval_accuracy: Optional[float] = None
    ce_grad_norm: Optional[float] = None
    kd_grad_norm: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalResult:
    accuracy: float
    sem: float
    accuracies: List[float]
    ledger: EnergyLedger
    ce_loss: float = 0.0
    repeats: int = 1
    sigma: float = 0.0
    k_active: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sem": self.sem,
            "accuracies": self.accuracies,
            "ce_loss": self.ce_loss,
            "repeats": self.repeats,
            "sigma": self.sigma,
            "k_active": self.k_active,
            "ledger": self.ledger.totals(),
        }


def _grad_norm(params: Sequence[Tensor]) -> float:
    return float(math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None)))


def _correct(logits: Tensor, labels: np.ndarray) -> int:
    return int((logits.values.argmax(axis=1) == labels).sum())


def _run_epochs(name: str, train_set: ImageDataset, epochs: int, batch_size: int, seed: int,
                optimizer: Optimizer, optimizer_cfg, step: StepFn, augment=None,
                end_of_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> List[EpochMetrics]:
    history: List[EpochMetrics] = []
    shuffle_rng = derive_rng(seed, SHUFFLE)
    augment_rng = derive_rng(seed, "augment")
    batches = batch_count(train_set, batch_size)
    with Progress(disable=is_quiet(), transient=True) as progress:
        task = progress.add_task(f"{name}...", total=epochs * batches)
        for epoch in range(epochs):
            optimizer.lr = scheduled_lr(optimizer.base_lr, optimizer_cfg.schedule, epoch, epochs)
            sums: Dict[str, float] = {}
            grad_norms: Dict[str, float] = {}
            seen = correct = 0
            for index, (images, labels) in enumerate(iterate_batches(train_set, batch_size, True, shuffle_rng)):
                if augment is not None and (augment.crop_padding or augment.flip):
                    images = augment_batch(images, augment_rng, augment.crop_padding, augment.flip)
                out = step(images, labels, index == 0)
                for key in ("ce_grad_norm", "kd_grad_norm"):
                    if key in out:
                        grad_norms[key] = out.pop(key)
                correct += int(out.pop("correct"))
                for key, value in out.items():
                    sums[key] = sums.get(key, 0.0) + value * len(labels)
                seen += len(labels)
                progress.update(task, advance=1)
            metrics = EpochMetrics(epoch=epoch + 1, lr=optimizer.lr, train_accuracy=correct / max(seen, 1),
                                   **{k: v / max(seen, 1) for k, v in sums.items()}, **grad_norms)
            if end_of_epoch is not None:
                end_of_epoch(metrics)
            history.append(metrics)
            _log_epoch(name, metrics)
    return history


def _log_epoch(name: str, metrics: EpochMetrics):
    parts = [f"loss {metrics.loss:.4f}", f"acc {metrics.train_accuracy:.3f}"]
    if metrics.kd_loss:
        parts.append(f"kd {metrics.kd_loss:.4f}")
    if metrics.separation is not None:
        parts.append(f"separation {metrics.separation:.3f}")
    if metrics.eval_accuracy is not None:
        parts.append(f"eval {metrics.eval_accuracy:.3f}")
    metric(f"{name} epoch {metrics.epoch}", ", ".join(parts))


def train_teacher(teacher: ModelInstance, train_set: ImageDataset, epochs: int, batch_size: int,
                  optimizer_cfg, seed: int, augment=None) -> List[EpochMetrics]:
    """Plain cross-entropy training of an ANN teacher."""
    optimizer = build_optimizer(optimizer_cfg, teacher.parameters())
    teacher.train()

    def step(images, labels, first):
        optimizer.zero_grad()
        _, logits = forward(teacher, images)
        loss = ce_loss(logits, labels)
        loss.backward()
        optimizer.step()
        return {"loss": loss.item(), "ce_loss": loss.item(), "correct": _correct(logits, labels)}

    history = _run_epochs("teacher", train_set, epochs, batch_size, seed, optimizer, optimizer_cfg, step, augment)
    teacher.eval()
    return history


def teacher_separation(teacher: ModelInstance, dataset: ImageDataset, n_clusters: int,
                       batch_size: int = 256) -> float:
    features = []
    teacher.eval()
    with no_grad():
        for images, _ in iterate_batches(dataset, batch_size):
            features.append(forward_features(teacher, images).values)
    return pairwise_separation(np.concatenate(features), n_clusters)


def finetune_teacher(teacher: ModelInstance, train_set: ImageDataset, n_clusters: int, lambda_: float,
                     epochs: int, batch_size: int, optimizer_cfg, seed: int,
                     eval_set: Optional[ImageDataset] = None, augment=None) -> List[EpochMetrics]:
    """Continue teacher training with CE + lambda·SIM so its feature columns split into N contiguous clusters.

    lambda == 0 disables the similarity term and runs CE only.
    """
    if lambda_ > 0:
        raise ConfigError(f"disentanglement needs lambda ≤ 0, got {lambda_}")
    if teacher.feature_dim % n_clusters:
        raise PartitionError(f"teacher feature dimension {teacher.feature_dim} is not divisible "
                             f"into {n_clusters} clusters")
    optimizer = build_optimizer(optimizer_cfg, teacher.parameters())
    separation_set = eval_set if eval_set is not None else train_set

    def step(images, labels, first):
        optimizer.zero_grad()
        features, logits = forward(teacher, images)
        if lambda_ < 0:
            loss = teacher_finetune_loss(logits, labels, features, n_clusters, lambda_)
        else:
            loss = ce_loss(logits, labels)
        loss.backward()
        optimizer.step()
        with no_grad():
            ce = ce_loss(logits.detach(), labels).item()
            sim = sim_loss(features.detach(), n_clusters).item()
        return {"loss": loss.item(), "ce_loss": ce, "sim_loss": sim, "correct": _correct(logits, labels)}

    def end_of_epoch(metrics: EpochMetrics):
        metrics.separation = teacher_separation(teacher, separation_set, n_clusters, batch_size)
        if eval_set is not None:
            metrics.eval_accuracy = evaluate(teacher, eval_set, batch_size=batch_size, seed=seed).accuracy
        teacher.train()

    teacher.train()
    history = _run_epochs("finetune", train_set, epochs, batch_size, seed, optimizer, optimizer_cfg, step,
                          augment, end_of_epoch)
    teacher.eval()
    return history


def _teacher_features(teacher: ModelInstance, images: np.ndarray) -> Tensor:
    with no_grad():
        teacher.reset_states()
        return forward_features(teacher, images).detach()


def train_ensemble(model: EnsembleModel, teacher: ModelInstance, train_set: ImageDataset, epochs: int,
                   batch_size: int, optimizer_cfg, seed: int, policy: ActivationPolicy | None = None,
                   augment=None, log_grad_norms: bool = False) -> List[EpochMetrics]:
    """Joint distillation of all students and the head: CE(head) + alpha·KD(active slices).

    Under trained dropout a fresh K-subset is drawn per batch and only the active
    students are distilled; the head sees the zero-filled features.
    """
    if teacher.feature_dim != model.feature_dim:
        raise ShapeError(f"teacher feature dimension {teacher.feature_dim} does not match "
                         f"ensemble plan dimension {model.feature_dim}")
    policy = policy or model.policy
    k = policy.active_count(model.n_students) if policy.variant == PolicyVariant.TRAINED_DROPOUT \
        else model.n_students
    alpha = model.distill.alpha
    optimizer = build_optimizer(optimizer_cfg, model.parameters())
    dropout_rng = derive_rng(seed, DROPOUT)
    teacher.eval()
    model.set_mode(SpikeMode.HARD)
    model.train()

    def step(images, labels, first):
        active = sample_active_set(model.n_students, k, dropout_rng)
        target = _teacher_features(teacher, images)
        optimizer.zero_grad()
        out = ensemble_forward(model, images, active)
        ce = ce_loss(out.logits, labels)
        kd = kd_loss_ensemble(target, out.student_features, model.plan, active)
        result = {}
        if log_grad_norms and first:
            ce.backward()
            result["ce_grad_norm"] = _grad_norm(optimizer.params)
            optimizer.zero_grad()
            (kd * alpha).backward()
            result["kd_grad_norm"] = _grad_norm(optimizer.params)
            optimizer.zero_grad()
        loss = student_total_loss(ce, kd, alpha)
        loss.backward()
        optimizer.step()
        result.update({"loss": loss.item(), "ce_loss": ce.item(), "kd_loss": kd.item(),
                       "correct": _correct(out.logits, labels)})
        return result

    history = _run_epochs("ensemble", train_set, epochs, batch_size, seed, optimizer, optimizer_cfg, step, augment)
    model.eval()
    return history


def _sem(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def _forward_batch(model, images: np.ndarray, active: Optional[Tuple[int, ...]]) -> Tuple[Tensor, EnergyLedger]:
    if isinstance(model, EnsembleModel):
        out = ensemble_forward(model, images, active)
        return out.logits, out.ledger
    model.reset_states()
    _, logits = forward(model, images, trace=True)
    ledger = build_ledger(model.spec, model.trace, spiking=model.spiking, samples=len(images),
                          timesteps=model.timesteps if model.spiking else 1)
    return logits, ledger


def evaluate(model, dataset: ImageDataset, policy: ActivationPolicy | None = None, repeats: int = 1,
             batch_size: int = 256, seed: int = 0, noise: Optional[NoiseSpec] = None,
             clamp_noise: bool = False) -> EvalResult:
    """Accuracy mean ± SEM over `repeats` passes, each with fresh noise and fresh active sets.

    Works for a teacher `ModelInstance` as well as an `EnsembleModel`.
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be ≥ 1, got {repeats}")
    ensemble = isinstance(model, EnsembleModel)
    policy = policy or (model.policy if ensemble else ActivationPolicy())
    k = policy.active_count(model.n_students) if ensemble else None
    sigma = noise.sigma if noise is not None else 0.0

    was_training = model.training
    model.eval()
    accuracies: List[float] = []
    ledgers: List[EnergyLedger] = []
    ce_total = 0.0
    try:
        with no_grad():
            for repeat in range(repeats):
                data = dataset
                if sigma > 0:
                    data = add_gaussian_noise(dataset, noise, derive_rng(seed, NOISE, repeat), clamp=clamp_noise)
                dropout_rng = derive_rng(seed, DROPOUT, repeat)
                correct = 0
                for images, labels in iterate_batches(data, batch_size):
                    active = sample_active_set(model.n_students, k, dropout_rng) if ensemble else None
                    logits, ledger = _forward_batch(model, images, active)
                    correct += _correct(logits, labels)
                    ce_total += ce_loss(logits, labels).item() * len(labels)
                    ledgers.append(ledger)
                accuracies.append(correct / max(len(data), 1))
    finally:
        model.train(was_training)

    return EvalResult(accuracy=float(np.mean(accuracies)), sem=_sem(accuracies), accuracies=accuracies,
                      ledger=average_ledgers(ledgers), ce_loss=ce_total / max(len(dataset) * repeats, 1),
                      repeats=repeats, sigma=sigma, k_active=k)


def evaluate_fixed_subsets(model: EnsembleModel, dataset: ImageDataset, k: int,
                           batch_size: int = 256) -> Dict[Tuple[int, ...], float]:
    """Accuracy of every fixed K-subset of students, keyed by the subset."""
    if not 1 <= k <= model.n_students:
        raise ConfigError(f"cannot activate {k} of {model.n_students} students")
    results: Dict[Tuple[int, ...], float] = {}
    model.eval()
    with no_grad():
        for subset in combinations(range(model.n_students), k):
            correct = 0
            for images, labels in iterate_batches(dataset, batch_size):
                correct += _correct(ensemble_forward(model, images, subset).logits, labels)
            results[subset] = correct / max(len(dataset), 1)
    return results
