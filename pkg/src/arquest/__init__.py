"""Adaptive risk-questioning engine for life-insurance underwriting."""

__version__ = "0.1.0"
