"""Certified outer and inner estimates of uncertain backwards reachable sets of polynomial hybrid systems."""

__version__ = "0.1.0"
