"""Certifiable taboo-trap detection for small CNNs."""

__version__ = "0.1.0"
