"""Adversarial image detection from prediction divergence under input transforms."""

__version__ = "0.1.0"
