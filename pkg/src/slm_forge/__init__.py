"""Simulation and diagnostics for stochastic-volatility models whose price
process can turn into a strict local martingale after an initial enlargement
of the filtration."""

__version__ = "0.1.0"
