"""Spectral-consistency gating and rectification against adversarial images, at toy scale."""

__version__ = "0.1.0"
