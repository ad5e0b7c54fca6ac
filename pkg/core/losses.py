"""
Training objectives.

Student loss:   L = CE + alpha * KD
Teacher loss:   L = CE + lambda * SIM      (lambda < 0 rewards cluster separation)
"""
from itertools import combinations
from typing import Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from core.autodiff.functional import log_softmax
from core.autodiff.tensor import Tensor, take
from core.errors import ConfigError, PartitionError, ShapeError

NORM_EPSILON = 1e-8


class DistillConfig(BaseModel):
    alpha: float = Field(default=2.0, ge=0.0)
    lambda_: float = Field(default=-0.1, le=0.0, alias="lambda")
    n_students: int = Field(default=2, ge=1)
    feature_dim: int = Field(default=0, ge=0)
    batch_size: int = Field(default=64, ge=1)

    model_config = {"populate_by_name": True}

    @property
    def disentangle(self) -> bool:
        return self.lambda_ < 0


def _labels(labels, batch: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels.values if isinstance(labels, Tensor) else labels).astype(np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError(f"cross-entropy needs non-empty [B×classes] logits, got {logits.shape}")
    batch, classes = logits.shape
    labels = _labels(labels, batch, classes)
    one_hot = np.zeros(logits.shape, dtype=logits.dtype)
    one_hot[np.arange(batch), labels] = 1.0
    return -(log_softmax(logits) * one_hot).sum() * (1.0 / batch)


def kd_loss_single(v: Tensor, k: Tensor) -> Tensor:
    """Squared feature distance summed over D, averaged over the batch."""
    if v.shape != k.shape or v.ndim != 2:
        raise ShapeError(f"distillation needs two equal [B×D] tensors, got {v.shape} and {k.shape}")
    diff = v - k
    return (diff * diff).sum() * (1.0 / v.shape[0])


def kd_loss_ensemble(teacher_features: Tensor, student_features: Sequence[Optional[Tensor]], plan,
                     active: Optional[Iterable[int]] = None) -> Tensor:
    """Sum over students of the squared distance to the teacher columns each one owns.

    Students outside `active` (or passed as None) contribute nothing.
    """
    if len(student_features) != plan.n_students:
        raise ShapeError(f"{len(student_features)} student outputs for a plan of {plan.n_students} subsets")
    if teacher_features.ndim != 2 or teacher_features.shape[1] != plan.feature_dim:
        raise ShapeError(f"teacher features {teacher_features.shape} do not match plan dimension {plan.feature_dim}")
    batch = teacher_features.shape[0]
    chosen = range(plan.n_students) if active is None else sorted(active)

    total = None
    for i in chosen:
        student = student_features[i]
        if student is None:
            continue
        subset = plan.subsets[i]
        if student.shape != (batch, len(subset)):
            raise ShapeError(f"student {i} outputs {student.shape}, plan assigns [{batch}×{len(subset)}]")
        diff = take(teacher_features, subset, axis=1) - student
        term = (diff * diff).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=teacher_features.dtype))
    return total * (1.0 / batch)


def student_total_loss(ce, kd, alpha: float):
    if alpha < 0:
        raise ConfigError(f"alpha must be ≥ 0, got {alpha}")
    return ce + kd * alpha


def _normalized_clusters(features: Tensor, n_clusters: int) -> Tensor:
    if features.ndim != 2:
        raise ShapeError(f"expected [B×D] features, got {features.shape}")
    batch, dim = features.shape
    if n_clusters < 1 or dim % n_clusters:
        raise PartitionError(f"feature dimension {dim} is not divisible into {n_clusters} clusters")
    rows = features.reshape(batch, n_clusters, dim // n_clusters)
    norms = ((rows * rows).sum(axis=2, keepdims=True) + NORM_EPSILON ** 2).sqrt()
    return rows / norms


def sim_loss(features: Tensor, n_clusters: int) -> Tensor:
    """Sum over rows and cluster pairs of the mean squared difference of L2-normalized sub-rows.

    Cluster i owns the contiguous columns [i·D/N, (i+1)·D/N).
    """
    unit = _normalized_clusters(features, n_clusters)
    width = features.shape[1] // n_clusters
    total = None
    for i, j in combinations(range(n_clusters), 2):
        diff = take(unit, [i], axis=1) - take(unit, [j], axis=1)
        term = (diff * diff).sum() * (1.0 / width)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=features.dtype))
    return total


def teacher_finetune_loss(logits: Tensor, labels, features: Tensor, n_clusters: int, lambda_: float) -> Tensor:
    if lambda_ >= 0:
        raise ConfigError(f"disentanglement needs lambda < 0, got {lambda_}")
    return ce_loss(logits, labels) + sim_loss(features, n_clusters) * lambda_


def pairwise_separation(features, n_clusters: int) -> float:
    """Row-wise RMS Euclidean distance between normalized cluster sub-rows, averaged over rows.

    Reaches 2 for two clusters and sqrt(8/3) for four when the sub-rows sum to zero.
    """
    values = np.asarray(features.values if isinstance(features, Tensor) else features, dtype=np.float64)
    if n_clusters < 2:
        return 0.0
    batch, dim = values.shape
    if dim % n_clusters:
        raise PartitionError(f"feature dimension {dim} is not divisible into {n_clusters} clusters")
    rows = values.reshape(batch, n_clusters, dim // n_clusters)
    unit = rows / np.sqrt((rows ** 2).sum(axis=2, keepdims=True) + NORM_EPSILON ** 2)
    squared: List[np.ndarray] = [((unit[:, i] - unit[:, j]) ** 2).sum(axis=1)
                                 for i, j in combinations(range(n_clusters), 2)]
    return float(np.sqrt(np.mean(squared, axis=0)).mean())
