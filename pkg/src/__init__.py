"""Occupancy-guided 3D Gaussian splatting for driving scenes."""

__version__ = "0.1.0"
