"""Patch-based implicit surface reconstruction from raw point clouds."""

from .geometry import TriangleMesh, normalize_unit_cube, unsigned_distance, winding_number
from .model import ModelConfig, ModelParams, desk_config, variant_config
from .sampling import CloudIndex

__version__ = "0.1.0"

__all__ = [
    "CloudIndex", "ModelConfig", "ModelParams", "TriangleMesh",
    "desk_config", "normalize_unit_cube", "unsigned_distance", "variant_config", "winding_number",
]
