"""Bayesian spatial functional concurrent regression with an unknown lag."""
__version__ = "0.1.0"
