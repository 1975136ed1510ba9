"""Bayesian symbolic state estimation with predicate classifiers."""

__version__ = "0.1.0"
