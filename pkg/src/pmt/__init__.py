"""Prototype-based mean teacher for multi-source domain-adaptive detection, at toy scale."""
from .core import Annotation, Box, ConfigError, DomainId, LossBreakdown, TrainConfig, ValidationError, iou, load_config

__version__ = "0.1.0"

__all__ = ["Annotation", "Box", "ConfigError", "DomainId", "LossBreakdown", "TrainConfig", "ValidationError",
           "iou", "load_config", "__version__"]
