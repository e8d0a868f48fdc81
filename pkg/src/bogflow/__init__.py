"""Feshbach-Schur ground-state construction for particle-number-preserving
Bogoliubov Hamiltonians, checked against exact diagonalization."""

__version__ = "0.1.0"
