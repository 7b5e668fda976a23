"""Imagination-limited Q-learning: tabular operator audits and a desk-scale deep agent."""

__version__ = "0.1.0"
