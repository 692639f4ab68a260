"""Desk-scale EEG-to-prosthesis pipeline: acquisition, filtering, classification,
evolutionary model search, compression and a simulated 3-DoF arm."""

__version__ = "0.1.0"
