"""Desk-scale webly supervised curriculum learning pipeline."""

__version__ = "0.1.0"
