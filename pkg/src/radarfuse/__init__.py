"""Sparse radar-camera fusion for end-to-end planning on synthetic driving scenes."""

from .core import FusionConfig, Frame, Pose2D
from .evaluate import aggregate, run_scenes
from .planner import PlannerParams, init_params, run_frame
from .training import TrainConfig, train
from .world import ScenarioConfig, WeatherNoise, generate_scene

__version__ = "0.1.0"

__all__ = [
    "FusionConfig",
    "Frame",
    "PlannerParams",
    "Pose2D",
    "ScenarioConfig",
    "TrainConfig",
    "WeatherNoise",
    "aggregate",
    "generate_scene",
    "init_params",
    "run_frame",
    "run_scenes",
    "train",
]
