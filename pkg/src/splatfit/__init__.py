"""Desk-scale differentiable Gaussian splatting with swappable densification."""

from .core import (
    Camera,
    GaussianPrimitive,
    Scene,
    SplattedGaussian,
    covariance,
    gaussian_eval,
    scene_extent,
    splat,
)
from .rasterizer import (
    GradientBuffer,
    RenderConfig,
    RenderOutput,
    accumulate_errors,
    backward,
    render,
    render_error_scalar,
)

__all__ = [
    "Camera",
    "GaussianPrimitive",
    "Scene",
    "SplattedGaussian",
    "covariance",
    "gaussian_eval",
    "scene_extent",
    "splat",
    "GradientBuffer",
    "RenderConfig",
    "RenderOutput",
    "accumulate_errors",
    "backward",
    "render",
    "render_error_scalar",
]

__version__ = "0.1.0"
