"""Margin Preserving Training toolkit: class-expanding model updates and negative-flip metrics."""

__version__ = "0.1.0"
