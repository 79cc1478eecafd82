"""Kindness-weighted inequity aversion for multi-agent RL on small gridworlds."""

__version__ = "0.1.0"
