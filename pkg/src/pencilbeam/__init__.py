"""Pencil-beam approximation of fractional Fokker-Planck transport: solvers, Monte Carlo and W1 distances."""

__version__ = "0.1.0"
