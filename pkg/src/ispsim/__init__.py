"""Simulator of GNN neighbor sampling over SSD-resident graphs, including an
in-storage sampling path executed by simulated SSD firmware."""

__version__ = "0.1.0"
