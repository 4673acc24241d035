"""Interleaved latent macro-planning and paragraph generation for data-to-text."""

__version__ = "0.1.0"
