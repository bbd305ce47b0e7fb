"""Cascaded 3D diffusion for paired PET/CT volumes conditioned on demographics."""

__version__ = "0.1.0"
