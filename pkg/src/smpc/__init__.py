"""Stochastic MPC with saturated disturbance feedback and chance constraints."""

__version__ = "0.1.0"
