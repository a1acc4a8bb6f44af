"""Numerical lab for minimal hyperbolic germs on a genus-2 surface."""

__version__ = "0.1.0"
