"""Distributed unscented Kalman filtering for target tracking over fading channels."""

__version__ = "0.1.0"
