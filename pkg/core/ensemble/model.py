"""
Spiking student ensemble.

Every student sees the same input and produces the teacher columns its plan
subset assigns to it. Student outputs are concatenated in plan order, placed back
at their teacher column positions, and fed to one linear classification head.
Inactive students contribute exact zero slices and no operations.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from core.arch.layers import Linear
from core.arch.model import HEAD_ID, ModelInstance, build_model, forward_features
from core.arch.spec import ArchSpec, ModelKind
from core.autodiff.functional import concat
from core.autodiff.tensor import Tensor, take
from core.energy import EnergyLedger, LayerRecord, build_ledger, merge_ledgers
from core.errors import CheckpointError, ConfigError, ShapeError
from core.losses import DistillConfig
from core.partition.plan import PartitionPlan
from core.snn.lif import LIFParams, SpikeMode
from core.utils.seeding import INIT, derive_seed


class PolicyVariant(str, Enum):
    ALL = "all"
    STOCHASTIC_EVAL = "stochastic_eval"
    TRAINED_DROPOUT = "trained_dropout"


class ActivationPolicy(BaseModel):
    variant: PolicyVariant = PolicyVariant.ALL
    k: Optional[int] = Field(default=None, ge=1)

    def active_count(self, n: int) -> int:
        if self.variant == PolicyVariant.ALL or self.k is None:
            return n
        if not 1 <= self.k <= n:
            raise ConfigError(f"active student count K={self.k} outside [1, {n}]")
        return self.k

    def label(self, n: int) -> str:
        return self.variant.value if self.variant == PolicyVariant.ALL else f"{self.variant.value}({self.active_count(n)})"


def sample_active_set(n: int, k: int, rng: np.random.Generator) -> Tuple[int, ...]:
    """K distinct student indices drawn uniformly, returned in ascending order."""
    if not 1 <= k <= n:
        raise ConfigError(f"cannot activate {k} of {n} students")
    if k == n:
        return tuple(range(n))
    return tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False)))


@dataclass
class EnsembleOutput:
    features: Tensor
    logits: Tensor
    ledger: EnergyLedger
    student_features: List[Optional[Tensor]]
    active: Tuple[int, ...]


class EnsembleModel:
    def __init__(self, students: List[ModelInstance], plan: PartitionPlan, head: Linear,
                 distill: DistillConfig, policy: ActivationPolicy | None = None):
        if len(students) != plan.n_students:
            raise ShapeError(f"{len(students)} students for a plan of {plan.n_students} subsets")
        for i, (student, size) in enumerate(zip(students, plan.sizes)):
            if student.spec.kind != ModelKind.SNN:
                raise ConfigError(f"student {i} must be a spiking network")
            if student.feature_dim != size:
                raise ShapeError(f"student {i} outputs {student.feature_dim} features, plan assigns {size}")
        if head.weight.shape[1] != plan.feature_dim:
            raise ShapeError(f"head expects {head.weight.shape[1]} features, plan covers {plan.feature_dim}")
        self.students = students
        self.plan = plan
        self.head = head
        self.distill = distill
        self.policy = policy or ActivationPolicy()
        self._inverse = plan.inverse_mapping()

    @property
    def n_students(self) -> int:
        return len(self.students)

    @property
    def feature_dim(self) -> int:
        return self.plan.feature_dim

    @property
    def classes(self) -> int:
        return self.head.weight.shape[0]

    @property
    def timesteps(self) -> int:
        return self.students[0].timesteps

    def modules(self):
        for student in self.students:
            yield from student.modules()
        yield self.head

    def parameters(self) -> List[Tensor]:
        return [p for student in self.students for p in student.parameters()] + self.head.parameters()

    def train(self, flag: bool = True) -> "EnsembleModel":
        for student in self.students:
            student.train(flag)
        return self

    def eval(self) -> "EnsembleModel":
        return self.train(False)

    @property
    def training(self) -> bool:
        return self.students[0].training

    def set_mode(self, mode: SpikeMode):
        for student in self.students:
            student.mode = mode

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for i, student in enumerate(self.students):
            state.update({f"student{i}.{k}": v for k, v in student.state_dict().items()})
        state.update({name: p.values.copy() for name, p in self.head.named_parameters()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for i, student in enumerate(self.students):
            prefix = f"student{i}."
            student.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})
        for name, p in self.head.named_parameters():
            if name not in state or state[name].shape != p.shape:
                raise CheckpointError(f"checkpoint entry '{name}' missing or mis-shaped")
            p.values = state[name].astype(p.dtype).copy()

    def __call__(self, images, active: Optional[Iterable[int]] = None) -> EnsembleOutput:
        return ensemble_forward(self, images, active)


def build_ensemble(student_specs: Sequence[ArchSpec], plan: PartitionPlan, classes: int, seed: int,
                   distill: DistillConfig, policy: ActivationPolicy | None = None, lif: LIFParams | None = None,
                   timesteps: int = 4) -> EnsembleModel:
    students = [build_model(spec.with_classes(None), derive_seed(seed, INIT, i), lif=lif, timesteps=timesteps)
                for i, spec in enumerate(student_specs)]
    head_rng = np.random.default_rng(derive_seed(seed, INIT, len(students)))
    head = Linear(HEAD_ID, plan.feature_dim, classes, head_rng)
    return EnsembleModel(students, plan, head, distill, policy)


def _head_record(model: EnsembleModel) -> LayerRecord:
    return LayerRecord(HEAD_ID, model.feature_dim * model.classes, neuron_count=model.feature_dim)


def ensemble_forward(model: EnsembleModel, images, active: Optional[Iterable[int]] = None) -> EnsembleOutput:
    """Run the active students on the shared input and classify their reassembled features."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    active = tuple(range(model.n_students)) if active is None else tuple(sorted(set(active)))
    if not active:
        raise ConfigError("active student set is empty")
    if active[0] < 0 or active[-1] >= model.n_students:
        raise ConfigError(f"active students {active} outside [0, {model.n_students})")
    batch = images.shape[0]

    student_features: List[Optional[Tensor]] = [None] * model.n_students
    ledgers: List[EnergyLedger] = []
    # fixed student order keeps floating-point reductions reproducible
    for i in active:
        student = model.students[i]
        student.reset_states()
        student_features[i] = forward_features(student, images, trace=True)
        ledgers.append(build_ledger(student.spec, student.trace, spiking=True, samples=batch,
                                    timesteps=student.timesteps).prefixed(f"student{i}."))

    parts = [f if f is not None else Tensor(np.zeros((batch, size), dtype=images.dtype))
             for f, size in zip(student_features, model.plan.sizes)]
    features = take(concat(parts, axis=1), model._inverse, axis=1)
    logits = model.head(features)

    head = EnergyLedger(samples=batch)
    head.add(_head_record(model))
    ledgers.append(head)
    return EnsembleOutput(features, logits, merge_ledgers(ledgers), student_features, active)
