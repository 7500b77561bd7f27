"""Grounded conversation generation toolkit."""

__version__ = "0.1.0"
