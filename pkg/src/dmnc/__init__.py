"""Dual-memory neural computer for asynchronous two-view sequence learning."""

__version__ = "0.1.0"
