"""Simulation testbed and Thompson-sampling bandit suite for brushing interventions."""

__version__ = "0.1.0"
