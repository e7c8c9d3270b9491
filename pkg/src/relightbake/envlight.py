"""Equirectangular environment lights and their importance-sampling tables.

Direction convention (used everywhere in the package): y is up,
``theta = acos(d.y)`` and ``phi = atan2(d.x, -d.z)`` in [0, 2 pi).
``u = phi / 2pi`` indexes columns, ``v = theta / pi`` indexes rows with row 0
at the top (+y pole).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pfm import read_pfm, write_pfm

LUMA = np.array([0.2126, 0.7152, 0.0722])
SIN_FLOOR = 1e-6


def luminance(rgb):
    return np.asarray(rgb) @ LUMA


@dataclass
class EnvironmentMap:
    pixels: np.ndarray  # (H, W, 3) linear radiance

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"environment map must be (H, W, 3), got {px.shape}")
        if px.shape[1] != 2 * px.shape[0]:
            raise ValueError(f"environment map must be 2:1, got {px.shape[1]}x{px.shape[0]}")
        if not np.all(np.isfinite(px)) or np.any(px < 0):
            raise ValueError("environment map values must be finite and non-negative")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def scaled(self, s: float) -> "EnvironmentMap":
        return EnvironmentMap(self.pixels * s)

    @classmethod
    def load(cls, path) -> "EnvironmentMap":
        return cls(read_pfm(path).astype(np.float64))

    def save(self, path) -> None:
        write_pfm(path, self.pixels)


def dir_to_uv(d):
    d = np.asarray(d, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
    phi = np.arctan2(d[..., 0], -d[..., 2])
    phi = np.where(phi < 0.0, phi + 2.0 * math.pi, phi)
    u = phi / (2.0 * math.pi)
    u = np.where(u >= 1.0, 0.0, u)
    return u, theta / math.pi


def uv_to_dir(u, v):
    theta = np.asarray(v) * math.pi
    phi = np.asarray(u) * 2.0 * math.pi
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), -st * np.cos(phi)], axis=-1)


def sample_radiance(env: EnvironmentMap, d):
    """Bilinear lookup with horizontal wrap and vertical clamp; pixel centers at half-integers."""
    u, v = dir_to_uv(d)
    h, w = env.height, env.width
    x = u * w - 0.5
    y = np.clip(v * h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x)
    y0 = np.minimum(np.floor(y), h - 2) if h > 1 else np.zeros_like(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64) % w
    x1 = (x0 + 1) % w
    y0 = y0.astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    px = env.pixels
    top = px[y0, x0] * (1.0 - fx) + px[y0, x1] * fx
    bot = px[y1, x0] * (1.0 - fx) + px[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


@dataclass
class LightCdf:
    env: EnvironmentMap
    marginal: np.ndarray  # (H,) row cdf
    conditional: np.ndarray  # (H, W) column cdfs
    total: float  # sum of luminance * cell solid angle
    cell_lum: np.ndarray  # (H, W)

    @property
    def height(self) -> int:
        return self.marginal.shape[0]

    @property
    def width(self) -> int:
        return self.conditional.shape[1]


def row_solid_angles(h: int, w: int) -> np.ndarray:
    edges = np.cos(np.linspace(0.0, math.pi, h + 1))
    return (edges[:-1] - edges[1:]) * (2.0 * math.pi / w)


def build_light_cdf(env: EnvironmentMap) -> LightCdf:
    h, w = env.height, env.width
    lum = luminance(env.pixels)
    theta = (np.arange(h) + 0.5) * math.pi / h
    sin_t = np.maximum(np.sin(theta), SIN_FLOOR)
    weights = lum * sin_t[:, None]
    row_sums = weights.sum(axis=1)
    if row_sums.sum() <= 0.0:
        raise ValueError("unsampleable light")
    conditional = np.cumsum(weights, axis=1)
    safe = np.where(row_sums > 0, row_sums, 1.0)
    conditional = conditional / safe[:, None]
    conditional[row_sums <= 0] = np.linspace(1.0 / w, 1.0, w)
    conditional[:, -1] = 1.0
    marginal = np.cumsum(row_sums) / row_sums.sum()
    marginal[-1] = 1.0
    total = float(np.sum(lum * row_solid_angles(h, w)[:, None]))
    return LightCdf(env, marginal, conditional, total, lum)


def _cell_pdf(cdf: LightCdf, row, col):
    # piecewise constant in solid angle: luminance / sum(luminance * dOmega)
    return cdf.cell_lum[row, col] / cdf.total


def sample_light(cdf: LightCdf, u1, u2):
    """Pick a pixel proportional to luminance x solid angle, then a uniform direction inside it.

    Returns ``(d, pdf, radiance)`` with ``pdf`` per steradian.
    """
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    h, w = cdf.height, cdf.width
    row = np.minimum(np.searchsorted(cdf.marginal, u1, side="right"), h - 1)
    r_lo = np.where(row > 0, cdf.marginal[np.maximum(row - 1, 0)], 0.0)
    r_hi = cdf.marginal[row]
    s1 = np.clip((u1 - r_lo) / np.maximum(r_hi - r_lo, 1e-300), 0.0, 1.0)
    cond = cdf.conditional[row]
    col = np.minimum((cond < u2[..., None]).sum(axis=-1), w - 1)
    c_lo = np.where(col > 0, np.take_along_axis(cond, np.maximum(col - 1, 0)[..., None], -1)[..., 0], 0.0)
    c_hi = np.take_along_axis(cond, col[..., None], -1)[..., 0]
    s2 = np.clip((u2 - c_lo) / np.maximum(c_hi - c_lo, 1e-300), 0.0, 1.0)
    # uniform in solid angle within the cell: linear in cos(theta) and phi
    cos0 = np.cos(row * math.pi / h)
    cos1 = np.cos((row + 1) * math.pi / h)
    cos_t = cos0 + s1 * (cos1 - cos0)
    phi = (col + s2) * (2.0 * math.pi / w)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    d = np.stack([sin_t * np.sin(phi), cos_t, -sin_t * np.cos(phi)], axis=-1)
    pdf = _cell_pdf(cdf, row, col)
    return d, pdf, sample_radiance(cdf.env, d)


def pdf_light(cdf: LightCdf, d):
    u, v = dir_to_uv(d)
    h, w = cdf.height, cdf.width
    row = np.clip((v * h).astype(np.int64), 0, h - 1)
    col = np.clip((u * w).astype(np.int64), 0, w - 1)
    return _cell_pdf(cdf, row, col)


# --------------------------------------------------------------------------
# Procedural maps for tests and the CLI
# --------------------------------------------------------------------------

def constant_env(value=1.0, height: int = 16) -> EnvironmentMap:
    px = np.empty((height, 2 * height, 3))
    px[...] = value
    return EnvironmentMap(px)


def procedural_env(name: str, height: int = 32) -> EnvironmentMap:
    """Small analytic skies: ``sky``, ``sunset``, ``studio``, ``constant``."""
    w = 2 * height
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    d = uv_to_dir(uu, vv)
    up = np.clip(d[..., 1], -1, 1)
    if name == "constant":
        return constant_env(1.0, height)
    if name == "sky":
        base = np.where(up[..., None] > 0, np.array([0.45, 0.6, 0.9]) * (0.6 + 0.4 * up[..., None]),
                        np.array([0.25, 0.22, 0.2]))
        sun = normalize_dir([0.5, 0.7, -0.5])
        lobe = np.exp(40.0 * (d @ sun - 1.0))[..., None] * np.array([12.0, 11.0, 9.0])
        return EnvironmentMap(base + lobe)
    if name == "sunset":
        base = np.array([0.9, 0.45, 0.2]) * (0.3 + 0.7 * np.exp(-4.0 * np.abs(up)))[..., None]
        sun = normalize_dir([-0.8, 0.15, 0.3])
        lobe = np.exp(25.0 * (d @ sun - 1.0))[..., None] * np.array([10.0, 5.0, 2.0])
        return EnvironmentMap(base + 0.05 + lobe)
    if name == "studio":
        a = np.exp(12.0 * (d @ normalize_dir([1.0, 1.0, 0.5]) - 1.0))
        b = np.exp(12.0 * (d @ normalize_dir([-1.0, 0.4, -0.8]) - 1.0))
        px = 0.08 + a[..., None] * np.array([6.0, 6.0, 5.5]) + b[..., None] * np.array([1.5, 2.0, 3.0])
        return EnvironmentMap(px)
    raise ValueError(f"unknown procedural environment {name!r}")


def normalize_dir(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def load_env(spec: str) -> EnvironmentMap:
    """``builtin:<name>[:<height>]`` or a path to a PFM file."""
    if spec.startswith("builtin:"):
        parts = spec.split(":")
        height = int(parts[2]) if len(parts) > 2 else 32
        return procedural_env(parts[1], height)
    return EnvironmentMap.load(spec)
