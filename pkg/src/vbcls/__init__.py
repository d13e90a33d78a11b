"""Variational-Bayesian conditional alignment with posterior label-shift correction."""

__version__ = "0.1.0"
