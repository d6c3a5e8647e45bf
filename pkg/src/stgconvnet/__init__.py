"""Spatial-temporal generative ConvNet: an energy-based model for video."""

__version__ = "0.1.0"
