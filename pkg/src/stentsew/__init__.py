"""Kinematic simulation of a vision-guided robotic sewing system."""

__version__ = "0.1.0"
