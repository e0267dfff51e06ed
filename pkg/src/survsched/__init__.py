"""Survival-time-aware radio resource scheduling as a Markov decision process."""

__version__ = "0.1.0"
