"""Differentiable 3D half-Gaussian splatting with a tile-based CPU rasterizer."""

__version__ = "0.1.0"

from .geometry import CameraModel, HalfGaussianPrimitive, Scene  # noqa: F401
