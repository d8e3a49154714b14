"""Desk-scale text- and style-conditioned denoising diffusion."""

__version__ = "0.1.0"
