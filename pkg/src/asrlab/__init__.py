"""Desk-scale hybrid HMM ASR laboratory."""

__version__ = "0.1.0"
