"""Hierarchical Bayesian calibration and response prediction for linear
structural models."""

__version__ = "0.1.0"
