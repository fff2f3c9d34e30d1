"""Sequence-to-sequence visual object tracking with a from-scratch autodiff engine."""

__version__ = "0.1.0"
