"""Fitting a blendshape face rig to images through differentiable renders,
landmark heatmaps and optical flow."""

__version__ = "0.1.0"
