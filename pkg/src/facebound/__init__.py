"""Two-stage face manipulation: conditional boundary prediction followed by
structure/texture-disentangled face synthesis, at desk scale."""

from .config import RunConfig, load_config
from .errors import (
    ConfigError, ContractError, DataError, DependencyError, FaceboundError, GeometryError, NumericalError,
)
from .geometry import LandmarkSet, pose_from_landmarks, rasterize_boundary
from .losses import LossWeights
from .models import ModelConfig, init_networks, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "DependencyError", "FaceboundError", "GeometryError",
    "LandmarkSet", "LossWeights", "ModelConfig", "NumericalError", "RunConfig", "init_networks",
    "load_checkpoint", "load_config", "pose_from_landmarks", "rasterize_boundary", "save_checkpoint",
]
