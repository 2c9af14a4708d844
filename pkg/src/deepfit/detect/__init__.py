"""Differentiable feature extraction: boxes, crops, landmark heatmaps, flow."""
from .blob import BlobBackend, chroma
from .flow import FlowField, VariationalFlowBackend, flow, horn_schunck
from .geometry import (
    CROP_SIZE,
    HEATMAP_SIZE,
    BoundingBox,
    CropResizeTransform,
    DetectionFailed,
    SoftArgmax,
    crop_resize,
    crop_resize_vjp,
    detect_bbox,
    soft_argmax,
    uncrop_coords,
)
from .landmarks import LandmarkDetection, LandmarkSet, landmarks

__all__ = [
    "BlobBackend", "BoundingBox", "CROP_SIZE", "CropResizeTransform", "DetectionFailed",
    "FlowField", "HEATMAP_SIZE", "LandmarkDetection", "LandmarkSet", "SoftArgmax",
    "VariationalFlowBackend", "chroma", "crop_resize", "crop_resize_vjp", "detect_bbox",
    "flow", "horn_schunck", "landmarks", "soft_argmax", "uncrop_coords",
]
