"""Calibration, rectification and self-refinement of camera-array light fields."""

__version__ = "0.1.0"
