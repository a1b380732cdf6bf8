"""Spike-driven skeleton action recognition with an energy profiler."""

from .config import ModelConfig, RunConfig, TrainConfig
from .model import S3TFormer, tet_loss

__all__ = ["ModelConfig", "RunConfig", "TrainConfig", "S3TFormer", "tet_loss"]
__version__ = "0.1.0"
