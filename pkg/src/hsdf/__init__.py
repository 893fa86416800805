"""Hierarchical signed-distance-field single-view reconstruction toolkit."""

__version__ = "0.1.0"
