"""Diffusion-prior embedding editing and retrieval, desk scale, CPU only."""

__version__ = "0.1.0"
