"""Implicit 3D morphable face model with disentangled deformation fields and detail refinement."""

__version__ = "0.1.0"
