"""Synthetic scenes, scene files, metrics, profiling and the gradient suite."""
from .bench import EvalReport, evaluate, profile, run_ablation
from .io import read_dataset, write_dataset
from .scenes import GroundingSample, SceneSpec, generate_dataset, generate_scene

__all__ = [
    "EvalReport",
    "GroundingSample",
    "SceneSpec",
    "evaluate",
    "generate_dataset",
    "generate_scene",
    "profile",
    "read_dataset",
    "run_ablation",
    "write_dataset",
]
