"""Covariate-dependent cross-covariance between asynchronously observed modalities."""

__version__ = "0.1.0"
