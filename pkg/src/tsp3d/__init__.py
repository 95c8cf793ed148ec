"""Text-guided sparse voxel pruning for 3D visual grounding, on numpy/scipy."""
from .errors import Tsp3dError
from .head import Box3D, iou3d, select_box
from .params import ParamStore, grad_check, load_checkpoint, save_checkpoint
from .pipeline import Model, ModelConfig, baseline_config, infer, train, train_step
from .sparse import SparseGrid, VoxelMask, voxelize

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "Model",
    "ModelConfig",
    "ParamStore",
    "SparseGrid",
    "Tsp3dError",
    "VoxelMask",
    "baseline_config",
    "grad_check",
    "infer",
    "iou3d",
    "load_checkpoint",
    "save_checkpoint",
    "select_box",
    "train",
    "train_step",
    "voxelize",
]
