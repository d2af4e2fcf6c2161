"""Stochastic two-layer baroclinic model on the sphere."""

__version__ = "0.1.0"
