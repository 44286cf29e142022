"""Surrogate-modelling toolkit for CO2-injection rock-dissolution fields."""

__version__ = "0.1.0"
