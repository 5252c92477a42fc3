"""Lightweight encoder-decoder recommendation engine."""

__version__ = "0.1.0"
