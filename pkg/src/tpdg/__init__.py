"""Learned tight-constraint and final-time prediction for convexified powered-descent guidance."""

__version__ = "0.1.0"
