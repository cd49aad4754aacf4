"""Transformer-augmented 3D segmentation with training-only multi-scale self-distillation."""

__version__ = "0.1.0"
