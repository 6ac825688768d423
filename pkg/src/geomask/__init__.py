"""Masked multimodal token modeling on synthetic aligned rasters."""

__version__ = "0.1.0"
