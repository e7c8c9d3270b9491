"""Lambert + GGX microfacet BRDF with visible-normal importance sampling.

Roughness ``r`` is remapped to ``alpha = r**2`` and the NDF uses ``alpha**2``.
Fresnel is Schlick with a fixed dielectric F0 of 0.04 and the shadowing term
is the height-correlated Smith form.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .geom import dot, normalize, onb_frames, reflect, to_local, to_world

F0 = 0.04
ROUGHNESS_MIN = 0.09
ROUGHNESS_MAX = 1.0


@dataclass
class BrdfParams:
    albedo: np.ndarray  # (..., 3)
    roughness: np.ndarray  # (...)
    normal: np.ndarray  # (..., 3)

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.roughness = np.asarray(self.roughness, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)

    def take(self, idx) -> "BrdfParams":
        return BrdfParams(self.albedo[idx], self.roughness[idx], self.normal[idx])


@dataclass(frozen=True)
class SpecularConstants:
    alpha: float
    k: float
    f0: float = F0


def remap_roughness(r: float, strict: bool = False) -> SpecularConstants:
    if not ROUGHNESS_MIN <= r <= ROUGHNESS_MAX:
        if strict:
            raise ValueError(f"roughness {r} outside [{ROUGHNESS_MIN}, {ROUGHNESS_MAX}]")
        warnings.warn(f"roughness {r} clamped to [{ROUGHNESS_MIN}, {ROUGHNESS_MAX}]", stacklevel=2)
        r = min(max(r, ROUGHNESS_MIN), ROUGHNESS_MAX)
    alpha = r * r
    return SpecularConstants(alpha=alpha, k=alpha * alpha)


def alpha_from_roughness(r):
    r = np.asarray(r)
    return r * r


def ggx_ndf(cos_nh, alpha):
    a2 = np.asarray(alpha) ** 2
    c2 = np.asarray(cos_nh) ** 2
    d = c2 * (a2 - 1.0) + 1.0
    return a2 / (math.pi * d * d)


def smith_lambda(cos_t, alpha):
    c = np.clip(cos_t, 1e-12, 1.0)
    tan2 = (1.0 - c * c) / (c * c)
    return 0.5 * (np.sqrt(1.0 + np.asarray(alpha) ** 2 * tan2) - 1.0)


def smith_g1(cos_t, alpha):
    return np.where(np.asarray(cos_t) > 0.0, 1.0 / (1.0 + smith_lambda(cos_t, alpha)), 0.0)


def smith_g_correlated(cos_nv, cos_nl, alpha):
    g = 1.0 / (1.0 + smith_lambda(cos_nv, alpha) + smith_lambda(cos_nl, alpha))
    return np.where((np.asarray(cos_nv) > 0.0) & (np.asarray(cos_nl) > 0.0), g, 0.0)


def fresnel_schlick(cos_vh, f0=F0):
    return f0 + (1.0 - f0) * (1.0 - np.asarray(cos_vh)) ** 5


def specular_term(n, wi, wo, alpha):
    """Scalar GGX lobe D*F*G / (4 cos_i cos_o); zero when either side faces away."""
    cos_i = dot(n, wi)
    cos_o = dot(n, wo)
    valid = (cos_i > 0.0) & (cos_o > 0.0)
    h = normalize(wi + wo, 1e-20)
    d = ggx_ndf(np.clip(dot(n, h), 0.0, 1.0), alpha)
    f = fresnel_schlick(np.clip(dot(wo, h), 0.0, 1.0))
    g = smith_g_correlated(cos_o, cos_i, alpha)
    denom = 4.0 * np.where(valid, cos_i * cos_o, 1.0)
    return np.where(valid, d * f * g / denom, 0.0)


def eval_brdf(p: BrdfParams, wi, wo, diffuse: bool = True, specular: bool = True):
    """f_r per channel, shape (..., 3)."""
    n = p.normal
    cos_i = dot(n, wi)
    cos_o = dot(n, wo)
    valid = ((cos_i > 0.0) & (cos_o > 0.0))[..., None]
    out = np.zeros(np.broadcast_shapes(p.albedo.shape, np.shape(wi)))
    if diffuse:
        out = out + p.albedo / math.pi
    if specular:
        out = out + specular_term(n, wi, wo, alpha_from_roughness(p.roughness))[..., None]
    return np.where(valid, out, 0.0)


# --------------------------------------------------------------------------
# Visible normal sampling
# --------------------------------------------------------------------------

def sample_vndf_local(wo_local, alpha, u1, u2):
    """Half vector from the GGX visible-normal distribution, local frame (z up)."""
    alpha = np.asarray(alpha)
    vh = normalize(np.stack([alpha * wo_local[..., 0], alpha * wo_local[..., 1], wo_local[..., 2]], axis=-1))
    lensq = vh[..., 0] ** 2 + vh[..., 1] ** 2
    safe = lensq > 1e-20
    inv = np.where(safe, 1.0 / np.sqrt(np.where(safe, lensq, 1.0)), 0.0)
    t1 = np.where(safe[..., None], np.stack([-vh[..., 1] * inv, vh[..., 0] * inv, np.zeros_like(inv)], axis=-1),
                  np.array([1.0, 0.0, 0.0]))
    t2 = np.cross(vh, t1)
    r = np.sqrt(u1)
    phi = 2.0 * math.pi * u2
    p1 = r * np.cos(phi)
    p2 = r * np.sin(phi)
    s = 0.5 * (1.0 + vh[..., 2])
    p2 = (1.0 - s) * np.sqrt(np.maximum(0.0, 1.0 - p1 * p1)) + s * p2
    p3 = np.sqrt(np.maximum(0.0, 1.0 - p1 * p1 - p2 * p2))
    nh = p1[..., None] * t1 + p2[..., None] * t2 + p3[..., None] * vh
    return normalize(np.stack([alpha * nh[..., 0], alpha * nh[..., 1], np.maximum(1e-12, nh[..., 2])], axis=-1))


def sample_ggx_vndf(wo, p: BrdfParams, u1, u2):
    """Reflect ``wo`` about a VNDF half vector.

    Returns ``(wi, pdf, valid)``; ``valid`` is False when ``wi`` lands below
    the surface, in which case the caller gives the sample zero weight.
    """
    n = p.normal
    t, b = onb_frames(n)
    alpha = alpha_from_roughness(p.roughness)
    wo_l = to_local(wo, t, b, n)
    h_l = sample_vndf_local(wo_l, alpha, np.asarray(u1), np.asarray(u2))
    wi_l = reflect(wo_l, h_l)
    wi = to_world(wi_l, t, b, n)
    valid = (wi_l[..., 2] > 0.0) & (wo_l[..., 2] > 0.0)
    pdf = np.where(valid, _vndf_pdf_half(wo_l[..., 2], h_l[..., 2], alpha), 0.0)
    return wi, pdf, valid


def _vndf_pdf_half(cos_o, cos_h, alpha):
    # D_vis(h) / (4 wo.h) with D_vis = G1(wo) D(h) (wo.h) / cos_o
    cos_o = np.maximum(cos_o, 1e-12)
    return smith_g1(cos_o, alpha) * ggx_ndf(cos_h, alpha) / (4.0 * cos_o)


def pdf_ggx_vndf(wo, wi, p: BrdfParams, allow_below: bool = False):
    """Solid-angle density of ``sample_ggx_vndf`` producing ``wi``."""
    n = p.normal
    alpha = alpha_from_roughness(p.roughness)
    cos_o = dot(n, wo)
    cos_i = dot(n, wi)
    h = normalize(wi + wo, 1e-20)
    cos_h = dot(n, h)
    ok = (cos_o > 0.0) & (dot(wo, h) > 0.0) & (cos_h > 0.0)
    if not allow_below:
        ok &= cos_i > 0.0
    return np.where(ok, _vndf_pdf_half(cos_o, np.clip(cos_h, 0.0, 1.0), alpha), 0.0)
