"""Differentiable LiDAR re-simulation with beam-aligned Gaussian splatting."""

from .rangeview import DomainError, RangeImage, RigidTransform, SensorSpec

__version__ = "0.1.0"
__all__ = ["DomainError", "RangeImage", "RigidTransform", "SensorSpec", "__version__"]
