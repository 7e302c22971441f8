"""Crossbar-aware structured pruning for CNNs on crossbar accelerators."""

__version__ = "0.1.0"
