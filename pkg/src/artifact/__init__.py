"""Simulation and pricing laboratory for diffusion markets with singular price components."""
__version__ = "0.1.0"
