"""Differentiable-physics motion imitation for small articulated characters."""

__version__ = "0.1.0"
