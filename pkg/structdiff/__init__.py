"""
Desk-scale two-stage structural diffusion: a multi-branch denoiser for
RGB, depth and surface normals, followed by a structure-guided refiner.
"""

__version__ = "0.1.0"
