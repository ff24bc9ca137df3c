"""Kinetic Monte Carlo lab for the constant-rate totally asymmetric zero-range process."""

__version__ = "0.1.0"
