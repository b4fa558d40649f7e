"""Continuous Bayesian-optimization tuning of an extrusion-force controller."""

__version__ = "0.1.0"
