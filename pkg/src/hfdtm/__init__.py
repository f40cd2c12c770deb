"""Corridor-first hierarchical forecasting of intersection turning movements."""

__version__ = "0.1.0"
