"""
Checkpoints are single `.npz` bundles: every parameter and batch-norm buffer under
its dotted name, plus a `__meta__` entry holding a JSON document that is enough to
rebuild the model before the arrays are loaded.
"""
import json
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
from pydantic import ValidationError

from core.arch.layers import Linear
from core.arch.model import HEAD_ID, ModelInstance, build_model
from core.arch.spec import ArchSpec
from core.ensemble.model import ActivationPolicy, EnsembleModel
from core.errors import CheckpointError, PartitionError
from core.losses import DistillConfig
from core.partition.plan import PartitionPlan
from core.snn.lif import LIFParams

FORMAT_VERSION = 1
META_KEY = "__meta__"
TEACHER = "teacher"
ENSEMBLE = "ensemble"


def _write(path: Path, state: Dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if META_KEY in state:
        raise CheckpointError(f"parameter name '{META_KEY}' is reserved")
    # np.savez appends .npz to bare names
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    np.savez(path, **state, **{META_KEY: np.array(json.dumps(meta, sort_keys=True))})
    return path


def _read(path: Path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as bundle:
            state = {k: bundle[k] for k in bundle.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{path}: not a readable checkpoint ({e})") from e
    if META_KEY not in state:
        raise CheckpointError(f"{path}: metadata entry missing")
    try:
        meta = json.loads(str(state.pop(META_KEY)))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt metadata ({e})") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
    return state, meta


def save_teacher(model: ModelInstance, path, extra: Dict[str, Any] | None = None) -> Path:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": TEACHER,
        "spec": model.spec.model_dump(mode="json"),
        "lif": model.lif.model_dump(mode="json"),
        "timesteps": model.timesteps,
        **(extra or {}),
    }
    return _write(path, model.state_dict(), meta)


def save_ensemble(model: EnsembleModel, path, extra: Dict[str, Any] | None = None) -> Path:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": ENSEMBLE,
        "specs": [s.spec.model_dump(mode="json") for s in model.students],
        "lif": model.students[0].lif.model_dump(mode="json"),
        "timesteps": model.timesteps,
        "classes": model.classes,
        "plan": model.plan.to_dict(),
        "distill": model.distill.model_dump(mode="json", by_alias=True),
        "policy": model.policy.model_dump(mode="json"),
        **(extra or {}),
    }
    return _write(path, model.state_dict(), meta)


def _teacher_from(state, meta) -> ModelInstance:
    model = build_model(ArchSpec.model_validate(meta["spec"]), seed=0, lif=LIFParams.model_validate(meta["lif"]),
                        timesteps=int(meta["timesteps"]))
    model.load_state_dict(state)
    return model.eval()


def _ensemble_from(state, meta) -> EnsembleModel:
    lif = LIFParams.model_validate(meta["lif"])
    timesteps = int(meta["timesteps"])
    students = [build_model(ArchSpec.model_validate(spec), seed=0, lif=lif, timesteps=timesteps)
                for spec in meta["specs"]]
    plan = PartitionPlan.from_dict(meta["plan"])
    head = Linear(HEAD_ID, plan.feature_dim, int(meta["classes"]), np.random.default_rng(0))
    model = EnsembleModel(students, plan, head, DistillConfig.model_validate(meta["distill"]),
                          ActivationPolicy.model_validate(meta["policy"]))
    model.load_state_dict(state)
    return model.eval()


def load_checkpoint(path) -> Tuple[Union[ModelInstance, EnsembleModel], dict]:
    """Rebuild a teacher or an ensemble and return it with its metadata."""
    state, meta = _read(path)
    builders = {TEACHER: _teacher_from, ENSEMBLE: _ensemble_from}
    if meta.get("kind") not in builders:
        raise CheckpointError(f"{path}: unknown checkpoint kind '{meta.get('kind')}'")
    try:
        return builders[meta["kind"]](state, meta), meta
    except (KeyError, ValidationError, PartitionError) as e:
        raise CheckpointError(f"{path}: metadata does not describe a valid {meta['kind']} ({e})") from e


def load_teacher(path) -> Tuple[ModelInstance, dict]:
    model, meta = load_checkpoint(path)
    if meta["kind"] != TEACHER:
        raise CheckpointError(f"{path} holds an {meta['kind']}, expected a teacher")
    return model, meta


def load_ensemble(path) -> Tuple[EnsembleModel, dict]:
    model, meta = load_checkpoint(path)
    if meta["kind"] != ENSEMBLE:
        raise CheckpointError(f"{path} holds a {meta['kind']}, expected an ensemble")
    return model, meta
