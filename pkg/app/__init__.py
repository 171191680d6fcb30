"""Hybrid vertical/horizontal offloading: MILP assignment, round-robin scheduling and simulation."""

__version__ = "0.3.0"
