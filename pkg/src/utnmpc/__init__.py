"""Signalized urban traffic network simulation with centralized and distributed MPC."""

__version__ = "0.1.0"
