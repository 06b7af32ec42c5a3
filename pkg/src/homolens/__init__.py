"""Homogeneous networks, effective-stepsize SGD on the sphere, and a stability lab."""

__version__ = "0.1.0"
