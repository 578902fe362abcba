"""Mixture-of-experts action policy with decoupled expert selection and weighting."""

__version__ = "0.1.0"
