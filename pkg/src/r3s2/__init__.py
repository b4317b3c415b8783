"""Spectral and Monte Carlo kernels for diffusion on positions and orientations."""

__version__ = "0.1.0"
