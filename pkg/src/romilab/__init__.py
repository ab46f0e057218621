"""Desk-scale offline RL lab: reverse model-based imagination on maze tasks."""

__version__ = "0.1.0"
