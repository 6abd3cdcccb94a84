"""Frustum-based 3D object detection from point clouds, sized for a desktop CPU."""

__version__ = "0.1.0"
