"""Perception-guided densification for CPU Gaussian splatting."""

import os

# TBB probing on import prints a warning on most machines; omp is always present.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from percsplat.model import (  # noqa: E402
    Camera,
    GaussianSet,
    RenderOutput,
    TrainConfig,
    View,
    logit,
    sigmoid,
    validate,
)

__all__ = [
    "Camera",
    "GaussianSet",
    "RenderOutput",
    "TrainConfig",
    "View",
    "logit",
    "sigmoid",
    "validate",
]

__version__ = "0.1.0"
