"""Perspective-aware crowd density maps and iterative density-aware distillation."""

__version__ = "0.1.0"
