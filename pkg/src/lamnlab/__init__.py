"""Simulation and verification tools for LAMN expansions of degenerate diffusions."""

__version__ = "0.1.0"
