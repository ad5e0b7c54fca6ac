import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml
from pydantic import ValidationError

from core.config.config import ExperimentConfig
from core.errors import ConfigError

DATA_DIR_ENV = "SNE_DATA_DIR"


@dataclass
class LoadedConfig:
    config: ExperimentConfig
    # exact file contents, embedded in every run report
    raw_text: str
    path: Optional[Path] = None


def _describe(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors())


def parse_config(text: str, path: Optional[Path] = None) -> LoadedConfig:
    source = path or "<config>"
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: invalid YAML: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_describe(e)}")
    return LoadedConfig(config, text, path)


def config_load(filename, seed: Optional[int] = None, desk_scale: Optional[bool] = None) -> LoadedConfig:
    """Read and validate an experiment config, applying command-line overrides.

    Overrides change the parsed model only; `raw_text` stays the file as written.
    """
    path = Path(filename)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    with open(path, "r", encoding="utf-8") as file:
        text = file.read()
    loaded = parse_config(text, path)
    config = loaded.config
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    if desk_scale is not None:
        config = config.model_copy(update={"dataset": config.dataset.model_copy(update={"desk_scale": desk_scale})})
    loaded.config = config
    return loaded


def resolve_data_path(config: ExperimentConfig) -> Optional[Path]:
    """`dataset.path`, else $SNE_DATA_DIR; synthetic data needs neither."""
    dataset = config.dataset
    if not dataset.file_backed:
        return None
    candidate = dataset.path or os.environ.get(DATA_DIR_ENV)
    if not candidate:
        raise ConfigError(f"dataset '{dataset.name}' needs dataset.path or the {DATA_DIR_ENV} environment variable")
    path = Path(candidate).expanduser()
    if not path.is_dir():
        raise ConfigError(f"dataset directory {path} does not exist")
    return path
