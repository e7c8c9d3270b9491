"""Baked relighting: an analytic SDF teacher distilled into a CNN G-buffer
renderer and a hash-grid visibility/indirect renderer, with MIS shading and
a spatial SVGF denoiser."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
