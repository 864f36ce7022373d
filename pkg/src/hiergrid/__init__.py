"""Hierarchical transmission / distribution / building control toolkit."""

__version__ = "0.1.0"
