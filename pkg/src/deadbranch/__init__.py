"""Adversarial dead-branch attacks on binary function similarity models."""

__version__ = "0.1.0"
