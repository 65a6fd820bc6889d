"""Stochastic parametrically forced NLS: simulator and statistics toolkit."""

__version__ = "0.1.0"
