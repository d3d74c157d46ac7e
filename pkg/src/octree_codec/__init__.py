"""Lossless octree geometry codec driven by a masked-attention context model."""

from .geometry import PointCloud, QuantizedCloud, load_point_cloud, save_point_cloud, quantize, dequantize
from .octree import NodeSequence, build, reconstruct, code_to_children, children_to_code

__version__ = "0.1.0"

__all__ = [
    "PointCloud",
    "QuantizedCloud",
    "load_point_cloud",
    "save_point_cloud",
    "quantize",
    "dequantize",
    "NodeSequence",
    "build",
    "reconstruct",
    "code_to_children",
    "children_to_code",
]
