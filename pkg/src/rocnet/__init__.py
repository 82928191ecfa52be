"""Recursive octree autoencoder for binary voxel grids."""

from .model import ModelConfig, ParameterStore, load_checkpoint, save_checkpoint
from .octree import NodeType, Octree, OctreeNode, build, deserialize, serialize, to_voxels
from .tensor import Tensor
from .training import TrainConfig, fit
from .voxel import VoxelGrid, chamfer, generate_synthetic, iou, load_grid, save_grid

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "NodeType",
    "Octree",
    "OctreeNode",
    "ParameterStore",
    "Tensor",
    "TrainConfig",
    "VoxelGrid",
    "build",
    "chamfer",
    "deserialize",
    "fit",
    "generate_synthetic",
    "iou",
    "load_checkpoint",
    "load_grid",
    "save_checkpoint",
    "save_grid",
    "serialize",
    "to_voxels",
]
