"""Compact SqueezeNet-style CT classifier built on a numpy autograd core."""

__version__ = "0.1.0"
