"""Relightable 3D Gaussian splatting for translucent objects.

Reconstruction of a Gaussian scene with physically based surface shading plus
a neural subsurface residual, trained under one-light-at-a-time supervision
with multi-view silhouette and depth consistency losses.
"""

__version__ = "0.1.0"

from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]
