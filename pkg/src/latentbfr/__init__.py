"""Blind face restoration with a latent diffusion prior and identity guidance."""

from .config import ConfigError, PipelineConfig, load_config
from .kernels import BACKEND, available_backends

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "PipelineConfig", "available_backends", "load_config", "__version__"]
