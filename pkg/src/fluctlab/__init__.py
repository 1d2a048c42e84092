"""Simulation laboratory for small-noise fluctuations of stochastic scalar conservation laws."""

__version__ = "0.1.0"
