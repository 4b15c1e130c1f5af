"""Desk-scale diffusion transfer-learning lab with training-time domain guidance."""

__version__ = "0.1.0"
