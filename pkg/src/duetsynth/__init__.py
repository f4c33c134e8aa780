"""Two-character skeletal interaction retargeting and augmentation."""

__version__ = "0.1.0"

from .core import (
    BoneScaleVector,
    InteractionClip,
    Motion,
    MotionDelta,
    Skeleton,
    add_delta,
    adjacency,
    apply_bone_scales,
    bone_lengths,
    delta,
    velocity,
)
from .errors import (
    ConfigError,
    DivergenceError,
    DomainError,
    DuetSynthError,
    FormatError,
    ShapeError,
    TrainingDivergedError,
)

__all__ = [
    "BoneScaleVector",
    "ConfigError",
    "DivergenceError",
    "DomainError",
    "DuetSynthError",
    "FormatError",
    "InteractionClip",
    "Motion",
    "MotionDelta",
    "ShapeError",
    "Skeleton",
    "TrainingDivergedError",
    "add_delta",
    "adjacency",
    "apply_bone_scales",
    "bone_lengths",
    "delta",
    "velocity",
]
