"""Robust Bayesian estimation by Hellinger projection of nonparametric posteriors."""

__version__ = "0.1.0"
