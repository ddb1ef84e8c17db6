"""Deterministic smart-meter mesh routing simulator with cooperative relaying."""

__version__ = "0.1.0"
