"""Desk-scale audio-visual sound source localization testbed."""

__version__ = "0.1.0"
