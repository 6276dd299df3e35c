"""Adaptive Taylor-Hood finite elements for control-constrained Navier-Stokes optimal control."""

__version__ = "0.1.0"
