"""Text-directed control of a planar physics character via staged distillation."""

__version__ = "0.1.0"
