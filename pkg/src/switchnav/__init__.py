"""Robust switching state estimation: dead reckoning + VIO with health-monitored
hard switching, pose-graph backend, and a deterministic mission simulator."""

__version__ = "0.1.0"
