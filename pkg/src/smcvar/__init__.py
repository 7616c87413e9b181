"""Online asymptotic-variance estimators for the bootstrap particle filter."""

__version__ = "0.1.0"
