"""Numerical laboratory for directional and subspace maximal operators."""

__version__ = "0.1.0"
