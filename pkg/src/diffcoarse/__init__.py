"""Numerical laboratory for difference coarse-graining, (x1, x2) -> |x1 - x2|."""

__version__ = "0.1.0"
