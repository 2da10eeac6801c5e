"""Contrastive user representations from timestamped command sequences."""

__version__ = "0.1.0"
