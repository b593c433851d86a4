"""Numerical workbench for projected Hamiltonian orbits, their jets and tangencies."""

__version__ = "0.1.0"
