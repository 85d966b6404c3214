"""Variational Monte Carlo with a CP-decomposed backflow determinant."""

__version__ = "0.1.0"
