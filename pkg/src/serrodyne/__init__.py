"""Serrodyne optical frequency shifting and PDH offset-lock modelling."""

__version__ = "0.1.0"
