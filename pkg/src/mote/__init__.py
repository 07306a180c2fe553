"""Mixture-of-ternary-experts up-cycling at desk scale."""

__version__ = "0.1.0"
