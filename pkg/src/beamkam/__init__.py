"""Birkhoff normal forms and KAM-type reductions for a nonlinear beam equation on a torus."""

__version__ = "0.1.0"
