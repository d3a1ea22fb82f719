"""Diffusion-based local occupancy prediction for exploring robots."""

__version__ = "0.1.0"
