"""Robust tube-based distributed MPC toolkit."""
__version__ = "0.1.0"
