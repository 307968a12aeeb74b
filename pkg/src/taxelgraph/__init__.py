"""Tactile perception with dynamic hierarchical point-set graph networks, plus PPO control."""

__version__ = "0.1.0"
