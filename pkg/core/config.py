"""Run configuration: YAML sections mapped onto the component dataclasses.

Example::

    seed: 0
    model: {d_model: 96, n_heads: 4}
    train: {steps: 2000}
    paths: {output_dir: runs/toy}
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from dotenv import load_dotenv

from core.errors import ConfigError
from core.rdit import ModelConfig
from core.sampler import SamplerConfig
from core.scene_world import WorldConfig
from core.trainer import DatasetConfig, DropoutConfig, TrainConfig

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class PathsConfig:
    output_dir: str = "runs/default"
    checkpoint: Optional[str] = None
    geometry_bank: Optional[str] = None
    scenes: Optional[str] = None

    def validate(self):
        if not self.output_dir:
            raise ConfigError("paths.output_dir must not be empty")


SECTIONS = {
    "model": ModelConfig,
    "dropout": DropoutConfig,
    "sampler": SamplerConfig,
    "dataset": DatasetConfig,
    "train": TrainConfig,
    "world": WorldConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    log_level: str = "INFO"

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        if tuple(self.world.grid) != tuple(self.model.grid):
            raise ConfigError(f"world.grid {tuple(self.world.grid)} must equal model.grid {tuple(self.model.grid)}")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got {self.log_level!r}")
        return self

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for name in ("model", "world"):
            for key, value in data[name].items():
                if isinstance(value, tuple):
                    data[name][key] = list(value)
        return data

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _section(cls, name: str, raw: Any):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    values = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        values[key] = value
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


def config_from_dict(data: Optional[Dict[str, Any]]) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("run config must be a mapping at the top level")
    unknown = sorted(set(data) - set(SECTIONS) - {"seed", "log_level"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _section(cls, name, data.get(name)) for name, cls in SECTIONS.items()}
    return RunConfig(**sections, seed=int(data.get("seed", 0)), log_level=str(data.get("log_level", "INFO")))


def apply_env_overrides(config: RunConfig) -> RunConfig:
    """RDIT_OUTPUT_DIR and RDIT_LOG_LEVEL take precedence over file values."""
    load_dotenv()
    output_dir = os.getenv("RDIT_OUTPUT_DIR")
    if output_dir:
        config.paths.output_dir = output_dir
    level = os.getenv("RDIT_LOG_LEVEL")
    if level:
        config.log_level = level.upper()
    return config


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Parse, override from the environment and validate a run config file."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    config = apply_env_overrides(config_from_dict(data))
    return config.validate()
