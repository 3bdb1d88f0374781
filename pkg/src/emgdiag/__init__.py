"""Decomposition and classification of needle EMG tracings."""

__version__ = "0.1.0"
