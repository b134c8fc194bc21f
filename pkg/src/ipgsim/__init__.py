"""Distributed game-theoretic navigation: potential-game planning, simulation, RL-style env."""

__version__ = "0.1.0"
