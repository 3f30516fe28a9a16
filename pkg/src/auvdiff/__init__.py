"""Diffusion-proposal TD3 control for an AUV data-collection task."""

from .config import RunConfig, load_config, parse_config
from .errors import AuvDiffError, ConfigError, LoadError, ShapeError, TrainingError, UsageError

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "parse_config",
    "AuvDiffError", "ConfigError", "LoadError", "ShapeError", "TrainingError", "UsageError",
]
