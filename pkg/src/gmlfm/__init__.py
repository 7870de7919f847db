"""Generalized-metric-learning factorization machines."""

__version__ = "0.1.0"
