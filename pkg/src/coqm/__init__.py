"""Contextual quantum metrology in simulation."""
__version__ = "0.1.0"
