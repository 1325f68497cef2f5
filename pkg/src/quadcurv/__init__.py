"""Metric principal curvature from organized range images by iterative quadric patch fitting."""

__version__ = "0.1.0"
