"""Masked diffusion transformer at desk scale: numpy engine, training, sampling and metrics."""

from .kernels import backend, set_backend
from .network import ModelConfig, model_config, model_forward, init_params
from .schedules import build_linear_schedule

__version__ = "0.1.0"

__all__ = ["ModelConfig", "backend", "build_linear_schedule", "init_params", "model_config", "model_forward", "set_backend"]
