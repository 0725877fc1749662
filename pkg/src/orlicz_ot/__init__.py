"""Regularized optimal transport with Orlicz-type regularizers on grids."""

__version__ = "0.1.0"
