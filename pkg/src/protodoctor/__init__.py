"""Interpretable prototype-based ICU mortality prediction."""

__version__ = "0.1.0"
