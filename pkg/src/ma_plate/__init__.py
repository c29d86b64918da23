"""Numerics for prestrained thin plates and the Monge-Ampere constrained bending problem."""
__version__ = "0.1.0"
