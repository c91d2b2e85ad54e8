"""Semantic-grounded 3D affordance segmentation at desk scale.

Three stages: lift 2D teacher features onto point clouds, pre-train a patch
transformer with cross-modal affinity transfer, then fine-tune a
prompt-conditioned segmentation transformer on top of it.
"""

from .errors import (
    InvalidConfig,
    InvalidInput,
    InvalidPrompt,
    InvalidSpec,
    LiftingFailed,
    NonFiniteLoss,
)

__version__ = "0.1.0"

__all__ = [
    "InvalidConfig",
    "InvalidInput",
    "InvalidPrompt",
    "InvalidSpec",
    "LiftingFailed",
    "NonFiniteLoss",
    "__version__",
]
