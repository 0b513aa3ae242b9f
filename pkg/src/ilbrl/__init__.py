"""Imitation learning by batch RL on tabular MDPs."""

__version__ = "0.1.0"
