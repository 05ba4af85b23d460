"""Robust essential-matrix estimation, implicit differentiation and flow losses."""

__version__ = "0.1.0"
