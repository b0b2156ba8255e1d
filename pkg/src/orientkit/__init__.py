"""Learned canonical orientation of point clouds with spherical correlation networks."""
__version__ = "0.1.0"
