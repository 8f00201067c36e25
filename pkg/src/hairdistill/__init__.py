"""Implicit head distillation with hair semantics, orientations, hair volumes and strands."""

__version__ = "0.1.0"
