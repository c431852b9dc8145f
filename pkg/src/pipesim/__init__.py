"""Deterministic pipeline-parallel training simulator."""

__version__ = "0.1.0"
