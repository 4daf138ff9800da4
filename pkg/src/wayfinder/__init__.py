"""Hallucination detection for grounded navigation instructions, at desk scale."""

__version__ = "0.1.0"
