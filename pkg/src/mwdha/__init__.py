"""Numerical toolkit for matrix-weighted dyadic harmonic analysis."""
__version__ = "0.1.0"
