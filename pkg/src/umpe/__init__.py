"""Unified map-prior encoder with a synthetic desk-scale benchmark."""

__version__ = "0.1.0"
