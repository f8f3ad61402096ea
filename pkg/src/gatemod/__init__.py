"""Entropy-regularized policy gating: simplex solver, neural circuit, experiments."""

__version__ = "0.1.0"
