"""Desk-scale Gaussian-splat trainer with denoising exploration and uncertainty pruning."""

from .config import TrainConfig
from .gaussian import Camera, GaussianPrimitive, Scene
from .optimizer import DenoiseOptimizer, ExploreConfig, LRSchedule, OptimizerState
from .renderer import backward, render
from .trainer import train

__all__ = ["Camera", "DenoiseOptimizer", "ExploreConfig", "GaussianPrimitive", "LRSchedule",
           "OptimizerState", "Scene", "TrainConfig", "backward", "render", "train"]
__version__ = "0.1.0"
