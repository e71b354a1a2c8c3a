"""Numerical laboratory for Harnack and entropy estimates along abstract metric flows on the torus."""

__version__ = "0.1.0"
