"""Routing and charging scheduling for an on-demand electric feeder bus service."""

__version__ = "0.1.0"
