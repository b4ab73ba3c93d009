"""Weakly supervised volumetric segmentation with a self-taught shape denoising prior."""

__version__ = "0.1.0"
