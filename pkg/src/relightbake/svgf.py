"""Spatial-only variance-guided a-trous denoiser."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from . import kernels
from .envlight import luminance

EPS = 1e-8


@dataclass
class SvgfConfig:
    iterations: int = 5
    sigma_z: float = 1.0
    sigma_n: float = 128.0
    sigma_l: float = 4.0
    demodulate: bool = True
    variance_window: int = 7

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if min(self.sigma_z, self.sigma_n, self.sigma_l) <= 0:
            raise ValueError("sigmas must be positive")


@dataclass
class AuxBuffers:
    depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3)
    depth_gradient: np.ndarray  # (H, W, 2)
    mask: np.ndarray | None = None
    albedo: np.ndarray | None = None

    @classmethod
    def from_frame(cls, aux: dict) -> "AuxBuffers":
        return cls(aux["depth"], aux["normal"], aux["depth_gradient"], aux.get("mask"), aux.get("albedo"))


def depth_gradient(depth) -> np.ndarray:
    """Forward differences (d/dx, d/dy) in depth units per pixel; the last column/row repeats its neighbour."""
    z = np.asarray(depth, dtype=np.float64)
    g = np.zeros(z.shape + (2,))
    if z.shape[1] > 1:
        g[:, :-1, 0] = z[:, 1:] - z[:, :-1]
        g[:, -1, 0] = g[:, -2, 0]
    if z.shape[0] > 1:
        g[:-1, :, 1] = z[1:, :] - z[:-1, :]
        g[-1, :, 1] = g[-2, :, 1]
    return g


def estimate_variance(frame, lum=None, window: int = 7) -> np.ndarray:
    """Unbiased luminance variance over a ``window`` square, clipped at the image border."""
    l = luminance(np.asarray(frame, dtype=np.float64)) if lum is None else np.asarray(lum, dtype=np.float64)
    # shifting by the median keeps the one-pass moments well conditioned and constants exactly zero
    l = l - np.median(l)
    ones = np.ones_like(l)
    kw = dict(size=window, mode="constant", cval=0.0)
    # uniform_filter returns means; rescale to sums over the in-bounds taps
    n = uniform_filter(ones, **kw) * window * window
    n = np.rint(n)
    mean = uniform_filter(l, **kw) * window * window / n
    sq = uniform_filter(l * l, **kw) * window * window / n
    var = (sq - mean * mean) * n / np.maximum(n - 1.0, 1.0)
    return np.maximum(var, 0.0)


def atrous_filter(frame, variance, aux: AuxBuffers, cfg: SvgfConfig | None = None, backend=None):
    """``cfg.iterations`` edge-aware passes with strides 1, 2, 4, ...

    Returns ``(frame, variance)``. Pixels with mask <= 0.5 pass through and
    never contribute to their neighbours.
    """
    cfg = cfg or SvgfConfig()
    impl = backend or kernels
    color = np.asarray(frame, dtype=np.float64)
    h, w = color.shape[:2]
    mask = np.ones((h, w)) if aux.mask is None else np.asarray(aux.mask, dtype=np.float64)
    demod = None
    if cfg.demodulate and aux.albedo is not None:
        demod = np.where(mask[..., None] > 0.5, np.maximum(np.asarray(aux.albedo, dtype=np.float64), 1e-3), 1.0)
        color = color / demod
    var = np.asarray(variance, dtype=np.float64)
    normal = np.asarray(aux.normal, dtype=np.float64)
    depth = np.asarray(aux.depth, dtype=np.float64)
    dgrad = np.asarray(aux.depth_gradient, dtype=np.float64)
    for i in range(cfg.iterations):
        color, var = impl.atrous_pass(color, var, luminance(color), depth, normal, dgrad, mask, 1 << i,
                                      cfg.sigma_z, cfg.sigma_n, cfg.sigma_l, EPS)
    if demod is not None:
        color = color * demod
    return color, var


def denoise(frame, aux: AuxBuffers, cfg: SvgfConfig | None = None) -> np.ndarray:
    cfg = cfg or SvgfConfig()
    color = np.asarray(frame, dtype=np.float64)
    lum_src = color
    if cfg.demodulate and aux.albedo is not None:
        m = np.ones(color.shape[:2]) if aux.mask is None else aux.mask
        lum_src = color / np.where(m[..., None] > 0.5, np.maximum(aux.albedo, 1e-3), 1.0)
    var = estimate_variance(lum_src, window=cfg.variance_window)
    return atrous_filter(color, var, aux, cfg)[0]
