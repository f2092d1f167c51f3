"""Controlled forward-backward stochastic Volterra equations on a scenario tree."""

__version__ = "0.1.0"
