"""Quantal Stackelberg equilibrium learning in leader-follower Markov games."""

__version__ = "0.1.0"
