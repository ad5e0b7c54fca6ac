"""
Data-driven feature partitioning over a frozen teacher.

Columns of the feature matrix (one per teacher feature dimension) are grouped by
cosine geometry: k-means runs as Euclidean k-means on L2-normalized columns and
agglomerative clustering uses complete linkage on cosine distances.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.cluster import AgglomerativeClustering, kmeans_plusplus
from sklearn.metrics.pairwise import cosine_distances

from core.arch.model import ModelInstance, forward_features
from core.autodiff.tensor import no_grad
from core.errors import DataFormatError, PartitionError
from core.partition.plan import PartitionPlan, PartitionScheme, contiguous_partition, fixed_partition

MAX_LLOYD_ITERATIONS = 300
COLUMN_EPSILON = 1e-12


def extract_feature_matrix(teacher: ModelInstance, dataset, batch_size: int = 256,
                           row_cap: Optional[int] = None, seed: Optional[int] = None) -> np.ndarray:
    """Penultimate teacher activations for every sample, shape [M×D].

    The teacher is evaluated in inference mode and left unchanged. With `row_cap`
    a seeded subset of rows is kept, in dataset order.
    """
    images = dataset.images
    if len(images) == 0:
        raise DataFormatError("cannot extract features from an empty dataset")
    was_training = teacher.training
    teacher.eval()
    rows = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                teacher.reset_states()
                rows.append(forward_features(teacher, images[start:start + batch_size]).values)
    finally:
        teacher.train(was_training)
    matrix = np.concatenate(rows, axis=0).astype(np.float64)
    return cap_rows(matrix, row_cap, seed)


def cap_rows(matrix: np.ndarray, row_cap: Optional[int], seed: Optional[int] = None) -> np.ndarray:
    if row_cap is None or matrix.shape[0] <= row_cap:
        return matrix
    keep = np.sort(np.random.default_rng(seed).choice(matrix.shape[0], size=row_cap, replace=False))
    return matrix[keep]


def _columns(matrix: np.ndarray, n: int) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise PartitionError(f"feature matrix must be [M×D], got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise PartitionError("feature matrix contains non-finite values")
    dim = matrix.shape[1]
    if n < 1 or n > dim:
        raise PartitionError(f"cannot form {n} clusters from {dim} feature columns")
    columns = matrix.T
    norms = np.linalg.norm(columns, axis=1, keepdims=True)
    return columns / np.maximum(norms, COLUMN_EPSILON)


def _plan_from_labels(labels: np.ndarray, n: int, scheme: PartitionScheme, seed: Optional[int]) -> PartitionPlan:
    groups = [sorted(int(i) for i in np.flatnonzero(labels == k)) for k in range(n)]
    groups.sort(key=lambda g: g[0] if g else len(labels))
    return PartitionPlan(groups, scheme, len(labels), seed).check()


@dataclass
class KMeansRun:
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    history: List[float] = field(default_factory=list)
    iterations: int = 0


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    distances = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return distances.argmin(axis=1)


def _objective(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _reseed_empty(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Give every empty cluster the column farthest from its own centroid."""
    n = centroids.shape[0]
    for k in range(n):
        if np.any(labels == k):
            continue
        sizes = np.bincount(labels, minlength=n)
        distances = ((points - centroids[labels]) ** 2).sum(axis=1)
        distances[sizes[labels] <= 1] = -1.0
        farthest = int(distances.argmax())
        labels[farthest] = k
        centroids[k] = points[farthest]
    return labels


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int) -> KMeansRun:
    labels = _assign(points, centroids)
    labels = _reseed_empty(points, centroids, labels)
    history: List[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        centroids = np.stack([points[labels == k].mean(axis=0) for k in range(centroids.shape[0])])
        history.append(_objective(points, centroids, labels))
        new_labels = _reseed_empty(points, centroids, _assign(points, centroids))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansRun(labels, centroids, _objective(points, centroids, labels), history, iterations)


def kmeans_columns(matrix: np.ndarray, n: int, seed: Optional[int] = None, n_init: int = 8,
                   max_iter: int = MAX_LLOYD_ITERATIONS) -> KMeansRun:
    """Best of `n_init` k-means++ seeded Lloyd runs over the normalized columns."""
    points = _columns(matrix, n)
    rng = np.random.default_rng(seed)
    best: Optional[KMeansRun] = None
    for _ in range(max(1, n_init)):
        centers, _ = kmeans_plusplus(points, n_clusters=n, random_state=int(rng.integers(2 ** 31 - 1)))
        run = _lloyd(points, centers.copy(), max_iter)
        if best is None or run.objective < best.objective - 1e-12:
            best = run
    return best


def kmeans_partition(matrix: np.ndarray, n: int, seed: Optional[int] = None, n_init: int = 8) -> PartitionPlan:
    """Cosine k-means over teacher feature columns; cluster sizes may differ."""
    run = kmeans_columns(matrix, n, seed, n_init)
    return _plan_from_labels(run.labels, n, PartitionScheme.KMEANS, seed)


def balance_targets(labels: np.ndarray, n: int) -> np.ndarray:
    """Target size per cluster: D // N each, the D mod N extra slots go to the largest clusters."""
    dim = labels.size
    sizes = np.bincount(labels, minlength=n)
    targets = np.full(n, dim // n)
    # stable sort keeps the lower cluster index first among equal sizes
    largest = np.argsort(-sizes, kind="stable")[:dim % n]
    targets[largest] += 1
    return targets


def rebalance(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Fill deficient clusters with the closest members of oversized clusters.

    Centroids stay fixed during reallocation. Deficient clusters are served in
    index order; each move takes the donor closest to the receiving centroid.
    """
    labels = labels.copy()
    n = centroids.shape[0]
    targets = balance_targets(labels, n)
    while True:
        sizes = np.bincount(labels, minlength=n)
        deficient = np.flatnonzero(sizes < targets)
        if deficient.size == 0:
            return labels
        receiver = int(deficient[0])
        donors = np.flatnonzero(sizes[labels] > targets[labels])
        distances = ((points[donors] - centroids[receiver]) ** 2).sum(axis=1)
        labels[donors[int(distances.argmin())]] = receiver


def balanced_kmeans_partition(matrix: np.ndarray, n: int, seed: Optional[int] = None,
                              n_init: int = 8) -> PartitionPlan:
    run = kmeans_columns(matrix, n, seed, n_init)
    labels = rebalance(_columns(matrix, n), run.labels, run.centroids)
    return _plan_from_labels(labels, n, PartitionScheme.BALANCED_KMEANS, seed)


def agglomerative_partition(matrix: np.ndarray, n: int) -> PartitionPlan:
    """Complete-linkage merging of columns under cosine distance until N clusters remain."""
    points = _columns(matrix, n)
    dim = points.shape[0]
    if n == dim:
        labels = np.arange(dim)
    elif n == 1:
        labels = np.zeros(dim, dtype=np.int64)
    else:
        distances = cosine_distances(points)
        np.fill_diagonal(distances, 0.0)
        labels = AgglomerativeClustering(n_clusters=n, metric="precomputed",
                                         linkage="complete").fit_predict(np.clip(distances, 0.0, None))
    return _plan_from_labels(np.asarray(labels), n, PartitionScheme.AGGLOMERATIVE, None)


def build_partition(scheme: PartitionScheme | str, n: int, feature_dim: int, matrix: Optional[np.ndarray] = None,
                    seed: Optional[int] = None, fixed_mode: str = "contiguous") -> PartitionPlan:
    scheme = PartitionScheme(scheme)
    if scheme == PartitionScheme.CONTIGUOUS:
        return contiguous_partition(feature_dim, n)
    if scheme == PartitionScheme.FIXED:
        return fixed_partition(feature_dim, n, mode=fixed_mode, seed=seed)
    if matrix is None:
        raise PartitionError(f"scheme '{scheme.value}' needs a feature matrix")
    if matrix.shape[1] != feature_dim:
        raise PartitionError(f"feature matrix has {matrix.shape[1]} columns, teacher has {feature_dim}")
    if matrix.shape[0] < 2:
        raise PartitionError("clustering needs at least two feature rows")
    if scheme == PartitionScheme.KMEANS:
        return kmeans_partition(matrix, n, seed)
    if scheme == PartitionScheme.BALANCED_KMEANS:
        return balanced_kmeans_partition(matrix, n, seed)
    return agglomerative_partition(matrix, n)
