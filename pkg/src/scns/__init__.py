"""Spectral stochastic Galerkin simulator for compressible Navier-Stokes on the torus."""

__version__ = "0.1.0"
