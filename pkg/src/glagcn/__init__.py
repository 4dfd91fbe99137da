"""Graph-based lifting of 2D pose sequences to 3D center poses, in plain numpy."""
from .errors import (ConfigError, DataError, GlaGcnError, NumericError, ShapeError, UsageError,
                     ValidationError)
from .network import ModelConfig, build_model, forward, infer_with_flip, param_count
from .skeleton import PRESETS, SkeletonGraph, build_skeleton
from .training import TrainConfig, fit, grad_check

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "GlaGcnError", "NumericError", "ShapeError", "UsageError", "ValidationError",
    "ModelConfig", "build_model", "forward", "infer_with_flip", "param_count",
    "PRESETS", "SkeletonGraph", "build_skeleton",
    "TrainConfig", "fit", "grad_check",
]
