"""Personalized Gaussian-process forecasting of longitudinal cognitive scores."""

__version__ = "0.1.0"
