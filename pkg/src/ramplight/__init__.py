"""Learned ramp-rate control for PV plants with battery smoothing."""

__version__ = "0.1.0"
