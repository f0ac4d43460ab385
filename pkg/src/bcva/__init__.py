"""Behavioral cloning with a jointly trained state-value head and help gate."""

__version__ = "0.1.0"
