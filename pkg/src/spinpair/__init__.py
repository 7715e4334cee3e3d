"""Simulation toolkit for a hyperfine-coupled electron / 13C spin pair."""

__version__ = "0.1.0"
