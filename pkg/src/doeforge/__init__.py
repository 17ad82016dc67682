"""Differentiable DOE design for snapshot hyperspectral-depth imaging."""

__version__ = "0.1.0"
