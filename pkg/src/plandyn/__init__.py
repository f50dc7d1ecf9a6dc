"""Desk-scale laboratory for supervised, policy-gradient and Q-learning
training dynamics on graph path-planning tasks."""

__version__ = "0.1.0"
