"""Finite-element shape sensitivity of semilinear obstacle problems and a damage model."""

__version__ = "0.1.0"
