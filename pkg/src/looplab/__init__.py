"""Looped-transformer stability and scaling lab."""

__version__ = "0.1.0"
