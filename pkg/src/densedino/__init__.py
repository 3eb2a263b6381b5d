"""Self-distillation of small Vision Transformers with point-level reference tokens."""

from .encoder import EncoderConfig, VisionTransformer
from .distill import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = ["EncoderConfig", "VisionTransformer", "TrainConfig", "Trainer"]
