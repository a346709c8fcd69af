"""Trajectory engine and numerical verification toolkit for specular
billiards in strictly convex domains under external fields."""

__version__ = "0.1.0"
