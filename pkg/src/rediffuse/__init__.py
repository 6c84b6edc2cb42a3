"""Rotation-equivariant conditional diffusion for multi-focus image fusion."""

__version__ = "0.1.0"
