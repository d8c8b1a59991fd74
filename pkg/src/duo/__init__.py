"""Gaussian / uniform-state discrete diffusion duality toolkit."""

__version__ = "0.1.0"
