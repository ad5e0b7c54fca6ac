from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from core.errors import PartitionError


class PartitionScheme(str, Enum):
    FIXED = "fixed"
    KMEANS = "kmeans"
    BALANCED_KMEANS = "balanced_kmeans"
    AGGLOMERATIVE = "agglomerative"
    CONTIGUOUS = "contiguous"


@dataclass
class PartitionPlan:
    """N disjoint column subsets of a D-dimensional teacher feature space."""
    subsets: List[List[int]]
    scheme: PartitionScheme
    feature_dim: int
    seed: Optional[int] = None

    @property
    def n_students(self) -> int:
        return len(self.subsets)

    @property
    def sizes(self) -> List[int]:
        return [len(s) for s in self.subsets]

    def index_mapping(self) -> np.ndarray:
        """Teacher column of every position in the concatenated student output."""
        return np.concatenate([np.asarray(s, dtype=np.int64) for s in self.subsets]) if self.subsets \
            else np.zeros(0, dtype=np.int64)

    def inverse_mapping(self) -> np.ndarray:
        """Position in the concatenated student output of every teacher column."""
        mapping = self.index_mapping()
        inverse = np.empty_like(mapping)
        inverse[mapping] = np.arange(mapping.size)
        return inverse

    def offsets(self) -> List[int]:
        return [0] + list(np.cumsum(self.sizes)[:-1].astype(int))

    def check(self) -> "PartitionPlan":
        report = validate_partition(self, self.feature_dim)
        if not report.ok:
            raise PartitionError(f"invalid {self.scheme.value} plan: {report.describe()}")
        return self

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "seed": self.seed,
            "feature_dim": self.feature_dim,
            "subsets": [[int(i) for i in s] for s in self.subsets],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionPlan":
        try:
            plan = cls(subsets=[[int(i) for i in s] for s in data["subsets"]],
                       scheme=PartitionScheme(data["scheme"]),
                       feature_dim=int(data["feature_dim"]),
                       seed=data.get("seed"))
        except (KeyError, TypeError, ValueError) as e:
            raise PartitionError(f"malformed plan: {e}") from e
        return plan.check()


@dataclass
class PartitionReport:
    duplicates: List[int] = field(default_factory=list)
    gaps: List[int] = field(default_factory=list)
    out_of_range: List[int] = field(default_factory=list)
    empty_subsets: List[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.duplicates or self.gaps or self.out_of_range or self.empty_subsets)

    def describe(self) -> str:
        if self.ok:
            return "ok"
        parts = []
        if self.duplicates:
            parts.append(f"duplicate indices {self.duplicates}")
        if self.gaps:
            parts.append(f"uncovered indices {self.gaps}")
        if self.out_of_range:
            parts.append(f"out-of-range indices {self.out_of_range}")
        if self.empty_subsets:
            parts.append(f"empty subsets {self.empty_subsets}")
        return "; ".join(parts)


def validate_partition(plan: PartitionPlan, feature_dim: int) -> PartitionReport:
    report = PartitionReport()
    counts = np.zeros(feature_dim, dtype=np.int64)
    for position, subset in enumerate(plan.subsets):
        if not subset:
            report.empty_subsets.append(position)
        for index in subset:
            if 0 <= index < feature_dim:
                counts[index] += 1
            else:
                report.out_of_range.append(int(index))
    report.duplicates = [int(i) for i in np.flatnonzero(counts > 1)]
    report.gaps = [int(i) for i in np.flatnonzero(counts == 0)]
    return report


def _split_equal(order: np.ndarray, n: int) -> List[List[int]]:
    return [sorted(int(i) for i in chunk) for chunk in np.array_split(order, n)]


def fixed_partition(feature_dim: int, n: int, mode: str = "contiguous", seed: Optional[int] = None) -> PartitionPlan:
    """Equal split of the feature columns, either in index order or after a seeded shuffle.

    When N does not divide D the first D mod N subsets get one extra column.
    """
    if n < 1 or n > feature_dim:
        raise PartitionError(f"cannot split {feature_dim} features among {n} students")
    if mode == "contiguous":
        order = np.arange(feature_dim)
    elif mode == "random":
        order = np.random.default_rng(seed).permutation(feature_dim)
    else:
        raise PartitionError(f"unknown fixed partition mode '{mode}'")
    return PartitionPlan(_split_equal(order, n), PartitionScheme.FIXED, feature_dim, seed).check()


def contiguous_partition(feature_dim: int, n: int) -> PartitionPlan:
    if feature_dim % n:
        raise PartitionError(f"feature dimension {feature_dim} is not divisible into {n} clusters")
    return PartitionPlan(_split_equal(np.arange(feature_dim), n), PartitionScheme.CONTIGUOUS, feature_dim).check()


def write_plan(plan: PartitionPlan, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(plan.to_dict(), f, sort_keys=False, default_flow_style=None)
    return path


def read_plan(path: Path) -> PartitionPlan:
    path = Path(path)
    if not path.exists():
        raise PartitionError(f"plan file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise PartitionError(f"plan file {path} is not a mapping")
    return PartitionPlan.from_dict(data)
