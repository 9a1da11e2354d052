"""Hierarchical classification with adaptive prototype learning."""

__version__ = "0.1.0"
