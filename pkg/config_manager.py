"""
Training Configuration for Deco-Mamba

This module owns the run configuration: what to train, how to optimize it,
where the data lives and where results go.

Key Features:
- Dataclass sections (optimizer, schedule, data, output) around a ModelConfig
- Strict JSON loading: unknown keys are rejected with their full key path
- Exact save/load round trip
- DM_THREADS environment cap for internal parallelism
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Tuple, Type

import psutil

from errors import ConfigurationError
from network import ModelConfig

THREADS_ENV_VAR = "DM_THREADS"


# =============================================================================
# CONFIGURATION SECTIONS
# =============================================================================

@dataclass
class OptimizerConfig:
    """AdamW with decoupled weight decay"""
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class ScheduleConfig:
    """Cosine annealing with warm restarts; periods measured in epochs"""
    restart_period: float = 2.0
    period_mult: float = 2.0
    min_lr: float = 0.0


@dataclass
class DataConfig:
    data_dir: str = "data/synthetic"
    train_split: str = "train"
    val_split: str = "val"
    augment: bool = True
    free_rotation: bool = False
    prefetch: int = 2


@dataclass
class OutputConfig:
    run_dir: str = "runs/default"
    log_file: str = "train.log"
    keep_periodic: int = 3
    save_every: int = 0


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    epochs: int = 120
    batch_size: int = 16
    seed: int = 0
    quiet: bool = False

    @classmethod
    def default(cls) -> "TrainConfig":
        """lr 1e-4, batch 16, 224x224 inputs."""
        return cls()

    def validate(self) -> "TrainConfig":
        self.model.validate()
        if self.optimizer.lr <= 0:
            raise ConfigurationError("learning rate must be positive", key="optimizer.lr")
        if self.optimizer.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative", key="optimizer.weight_decay")
        if len(self.optimizer.betas) != 2 or not all(0 <= b < 1 for b in self.optimizer.betas):
            raise ConfigurationError("betas must be two values in [0, 1)", key="optimizer.betas")
        if self.schedule.restart_period < 1:
            raise ConfigurationError("restart period must be at least 1 epoch", key="schedule.restart_period")
        if self.schedule.period_mult < 1:
            raise ConfigurationError("period multiplier must be at least 1", key="schedule.period_mult")
        if not 0 <= self.schedule.min_lr <= self.optimizer.lr:
            raise ConfigurationError("min_lr must lie in [0, lr]", key="schedule.min_lr")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1", key="batch_size")
        if self.epochs < 1:
            raise ConfigurationError("at least one epoch is required", key="epochs")
        return self

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "model": self.model.to_dict(),
            "optimizer": asdict(self.optimizer),
            "schedule": asdict(self.schedule),
            "data": asdict(self.data),
            "output": asdict(self.output),
        }
        out["optimizer"]["betas"] = list(self.optimizer.betas)
        for f in fields(self):
            if f.name not in out:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        _reject_unknown(cls, data, "")
        kwargs: Dict[str, Any] = {}
        sections = {"optimizer": OptimizerConfig, "schedule": ScheduleConfig,
                    "data": DataConfig, "output": OutputConfig}
        for key, value in data.items():
            if key == "model":
                kwargs[key] = ModelConfig.from_dict(value, prefix="model")
            elif key in sections:
                _reject_unknown(sections[key], value, key)
                kwargs[key] = sections[key](**value)
            else:
                kwargs[key] = value
        config = cls(**kwargs)
        if isinstance(config.optimizer.betas, list):
            config.optimizer.betas = tuple(config.optimizer.betas)
        return config.validate()


def _reject_unknown(section: Type, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigurationError("expected a JSON object", key=prefix or "<root>")
    known = {f.name for f in fields(section)}
    for key in data:
        if key not in known:
            raise ConfigurationError("unknown configuration key", key=f"{prefix}.{key}" if prefix else key)


# =============================================================================
# FILE I/O
# =============================================================================

def load_train_config(path: str) -> TrainConfig:
    """Read and validate a JSON training configuration."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"invalid JSON in {path}: {e}")
    return TrainConfig.from_dict(data)


def save_train_config(config: TrainConfig, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


# =============================================================================
# ENVIRONMENT
# =============================================================================

def get_thread_count() -> int:
    """DM_THREADS if set, otherwise the physical core count (at least 1)."""
    value = os.environ.get(THREADS_ENV_VAR)
    if value:
        try:
            return max(int(value), 1)
        except ValueError:
            raise ConfigurationError(f"must be an integer, got {value!r}", key=THREADS_ENV_VAR)
    return max(psutil.cpu_count(logical=False) or os.cpu_count() or 1, 1)
