"""Fringe-projection simulation, temporal phase unwrapping and a learned fringe-order predictor."""

__version__ = "0.1.0"
