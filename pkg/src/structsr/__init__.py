"""Toy-scale one-step super-resolution distillation with structural conditioning."""

__version__ = "0.1.0"
