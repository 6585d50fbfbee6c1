"""Noisy-label learning over imbalanced subpopulations on synthetic vector data."""

__version__ = "0.1.0"
