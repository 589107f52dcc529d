"""Normalization-layer benchmark for white blood cell classification under domain shift."""

__version__ = "0.1.0"
