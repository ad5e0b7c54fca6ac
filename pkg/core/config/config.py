from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from core.arch.spec import ArchSpec, ModelKind, resnet_spec, vgg_spec
from core.ensemble.model import ActivationPolicy, PolicyVariant
from core.partition.plan import PartitionScheme
from core.snn.lif import LIFParams

SCHEMA_VERSION = 1

DESK_MAX_TRAIN = 2000
DESK_MAX_TEST = 500
DESK_WIDTH_MULTIPLIER = 0.125
NOISE_SIGMAS = [0.0, 0.01, 0.03, 0.05, 0.07]


class OptimizerConfig(BaseModel):
    name: Literal["sgd", "adam"] = "sgd"
    lr: float = Field(default=0.05, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    schedule: Literal["constant", "cosine"] = "constant"


class ArchConfig(BaseModel):
    family: Literal["vgg", "resnet"] = "vgg"
    depth: int = 5
    width: Literal["full", "mini"] = "full"
    width_multiplier: Optional[float] = Field(default=None, gt=0.0)
    base_channels: Optional[int] = Field(default=None, ge=1)
    input_size: Optional[int] = Field(default=None, ge=1)
    in_channels: Optional[int] = Field(default=None, ge=1)
    feature_width: Optional[int] = Field(default=None, ge=1)

    def to_spec(self, kind: ModelKind, classes: Optional[int], input_size: int, in_channels: int,
                width_multiplier: float = 1.0, feature_width: Optional[int] = None) -> ArchSpec:
        """Resolve into an `ArchSpec`; values set on the arch itself win over the dataset-derived ones."""
        multiplier = self.width_multiplier if self.width_multiplier is not None else width_multiplier
        size = self.input_size or input_size
        channels = self.in_channels or in_channels
        width = feature_width if feature_width is not None else self.feature_width
        if self.family == "vgg":
            return vgg_spec(self.depth, self.width, kind, classes, multiplier, size, channels, width)
        base = self.base_channels or (54 if self.width == "mini" else 64)
        return resnet_spec(self.depth, base, kind, classes, multiplier, size, channels, width)


class AugmentConfig(BaseModel):
    crop_padding: int = Field(default=0, ge=0)
    flip: bool = False


class DatasetConfig(BaseModel):
    name: Literal["synth", "mnist", "cifar10"] = "synth"
    path: Optional[str] = None
    desk_scale: bool = True
    classes: int = Field(default=4, ge=2)
    per_class: int = Field(default=64, ge=1)
    test_per_class: int = Field(default=32, ge=1)
    image_size: int = Field(default=8, ge=1)
    channels: int = Field(default=1, ge=1)
    separation: float = Field(default=3.0, ge=0.0)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    max_train: Optional[int] = Field(default=None, ge=1)
    max_test: Optional[int] = Field(default=None, ge=1)

    @property
    def file_backed(self) -> bool:
        return self.name != "synth"

    @property
    def train_limit(self) -> Optional[int]:
        return self.max_train or (DESK_MAX_TRAIN if self.desk_scale else None)

    @property
    def test_limit(self) -> Optional[int]:
        return self.max_test or (DESK_MAX_TEST if self.desk_scale else None)

    @property
    def width_multiplier(self) -> float:
        return DESK_WIDTH_MULTIPLIER if self.desk_scale else 1.0


class TeacherConfig(BaseModel):
    arch: ArchConfig = Field(default_factory=ArchConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    epochs: int = Field(default=5, ge=1)
    batch_size: int = Field(default=64, ge=1)


class DisentangleConfig(BaseModel):
    mode: Literal["none", "frozen_cluster", "finetune"] = "none"
    scheme: PartitionScheme = PartitionScheme.FIXED
    lambda_: float = Field(default=-0.1, le=0.0, alias="lambda")
    epochs: int = Field(default=15, ge=1, le=100)
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(lr=0.01))
    feature_row_cap: Optional[int] = Field(default=None, ge=1)

    model_config = {"populate_by_name": True}


class EnsembleConfig(BaseModel):
    n_students: int = Field(default=2, ge=1)
    student: ArchConfig = Field(default_factory=ArchConfig)
    alpha: float = Field(default=2.0, ge=0.0)
    timesteps: int = Field(default=4, ge=1, alias="T")
    lif: LIFParams = Field(default_factory=LIFParams)
    policy: PolicyVariant = PolicyVariant.ALL
    k_active: Optional[int] = Field(default=None, ge=1)
    epochs: int = Field(default=5, ge=1)
    batch_size: int = Field(default=64, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(name="adam", lr=1e-3))
    log_grad_norms: bool = False

    model_config = {"populate_by_name": True}

    @model_validator(mode="after")
    def _k_within_students(self):
        if self.k_active is not None and self.k_active > self.n_students:
            raise ValueError(f"k_active ({self.k_active}) exceeds n_students ({self.n_students})")
        return self

    def activation_policy(self) -> ActivationPolicy:
        return ActivationPolicy(variant=self.policy, k=self.k_active)


class EvalConfig(BaseModel):
    noise_sigmas: List[float] = Field(default_factory=lambda: list(NOISE_SIGMAS))
    repeats: int = Field(default=10, ge=1)
    batch_size: int = Field(default=256, ge=1)
    clamp_noise: bool = False
    workers: int = Field(default=2, ge=1)

    @field_validator("noise_sigmas")
    @classmethod
    def _non_negative(cls, sigmas: List[float]) -> List[float]:
        negative = [s for s in sigmas if s < 0]
        if negative:
            raise ValueError(f"noise sigmas must be ≥ 0, got {negative}")
        return sigmas


class ExperimentConfig(BaseModel):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    disentangle: DisentangleConfig = Field(default_factory=DisentangleConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @field_validator("schema_version")
    @classmethod
    def _known_schema(cls, version: int) -> int:
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version}, this build reads version {SCHEMA_VERSION}")
        return version

    def teacher_spec(self, classes: int, image_shape: Tuple[int, int, int]) -> ArchSpec:
        """ANN teacher with a classification head, sized for the loaded dataset."""
        return self.teacher.arch.to_spec(ModelKind.ANN, classes, image_shape[1], image_shape[0],
                                         self.dataset.width_multiplier)

    def student_spec(self, image_shape: Tuple[int, int, int], feature_width: Optional[int] = None) -> ArchSpec:
        return self.ensemble.student.to_spec(ModelKind.SNN, None, image_shape[1], image_shape[0],
                                             self.dataset.width_multiplier, feature_width)
