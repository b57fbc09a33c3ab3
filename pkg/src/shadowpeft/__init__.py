"""Frozen-backbone adaptation through a depth-shared shadow network."""
from .backbone import Backbone
from .config import (
    AdapterConfig,
    BaseConfig,
    ConfigError,
    LoraConfig,
    RunConfig,
    ShadowConfig,
    TaskConfig,
    TrainConfig,
    default_config,
    derive_implicit_config,
)
from .lora import LoraModel, match_budget
from .pipeline import ShadowPEFTModel, pool
from .tasks import make_task

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "Backbone", "BaseConfig", "ConfigError", "LoraConfig", "LoraModel", "RunConfig",
    "ShadowConfig", "ShadowPEFTModel", "TaskConfig", "TrainConfig", "default_config",
    "derive_implicit_config", "make_task", "match_budget", "pool",
]
