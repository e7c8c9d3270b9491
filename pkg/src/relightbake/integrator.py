"""Direct lighting with MIS and the two-bounce recursion, generic over providers.

A surface provider turns a camera into a G-buffer. A visibility provider is
bound to a set of surface points and answers (visibility, depth) for batches
of directions; it also supplies BRDF parameters at secondary points. Teacher
providers wrap the SDF scene, baked providers wrap the trained students.

Every random number is addressed by (pixel, round, slot, ...) through
``RngStream.keyed``, so frames are independent of tiling and thread count,
and the secondary stream never perturbs the primary one.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .brdf import BrdfParams, eval_brdf, pdf_ggx_vndf, sample_ggx_vndf
from .cnn import DirectRenderer, build_raymap, forward_gbuffer
from .envlight import EnvironmentMap, LightCdf, build_light_cdf, pdf_light, sample_light, sample_radiance
from .geom import RngStream, sphere_from_square, stratum_grid
from .hashgrid import HashRenderer
from .scene import FAR, NEAR, Camera, GBuffer, SdfScene, VisibilitySample, trace_gbuffer, visibility_depth

STRATEGIES = ("mis", "light", "brdf")
# keyed sample dimensions
_SLOT_LIGHT, _SLOT_BRDF = 0, 1
_STREAM_PRIMARY, _STREAM_SECONDARY = "primary", "secondary"


class Diagnostics(dict):
    def bump(self, key: str, n: int = 1) -> None:
        if n:
            self[key] = self.get(key, 0) + int(n)


def mis_weight(pdf_a, pdf_b, diag: Diagnostics | None = None):
    """Balance heuristic ``pdf_a / (pdf_a + pdf_b)``; 0 when both densities vanish."""
    pdf_a = np.asarray(pdf_a, dtype=np.float64)
    pdf_b = np.asarray(pdf_b, dtype=np.float64)
    s = pdf_a + pdf_b
    zero = s <= 0.0
    if diag is not None:
        diag.bump("mis_zero_pdf", int(np.sum(zero)))
    return np.where(zero, 0.0, pdf_a / np.where(zero, 1.0, s))


@dataclass
class ShadeConfig:
    env: EnvironmentMap
    spp: int = 16
    bounces: int = 1
    secondary_rays: int = 8
    strategy: str = "mis"
    diffuse: bool = True
    specular: bool = True
    tile_rows: int = 16
    threads: int = 1
    cdf: LightCdf | None = None

    def __post_init__(self):
        if self.spp < 1:
            raise ValueError("spp must be >= 1")
        if self.bounces not in (1, 2):
            raise ValueError("bounces must be 1 or 2")
        if self.secondary_rays < 1:
            raise ValueError("secondary_rays must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.cdf is None:
            self.cdf = build_light_cdf(self.env)


@dataclass
class ShadingPoint:
    x: np.ndarray  # (P, 3)
    n: np.ndarray  # (P, 3)
    albedo: np.ndarray  # (P, 3)
    roughness: np.ndarray  # (P,)

    @property
    def params(self) -> BrdfParams:
        return BrdfParams(self.albedo, self.roughness, self.n)


# --------------------------------------------------------------------------
# Providers
# --------------------------------------------------------------------------

class Timer(dict):
    def add(self, key: str, seconds: float) -> None:
        self[key] = self.get(key, 0.0) + seconds


class TeacherSurface:
    def __init__(self, scene: SdfScene):
        self.scene = scene

    def surface(self, camera: Camera) -> GBuffer:
        return trace_gbuffer(self.scene, camera)


class BakedSurface:
    def __init__(self, model: DirectRenderer):
        self.model = model

    def surface(self, camera: Camera) -> GBuffer:
        return forward_gbuffer(self.model, build_raymap(camera, self.model.cfg.downsample), camera.position)


class _TeacherHandle:
    def __init__(self, scene, x, near, far):
        self.scene, self.x, self.near, self.far = scene, x, near, far

    def query(self, wi) -> VisibilitySample:
        return visibility_depth(self.scene, self.x[:, None, :], wi, self.near, self.far)


class TeacherVisibility:
    """Sphere-traced visibility and exact materials at secondary points."""

    def __init__(self, scene: SdfScene, near: float = NEAR, far: float = FAR):
        self.scene, self.near, self.far = scene, near, far
        self.queries = 0

    def bind(self, x) -> _TeacherHandle:
        return _CountingHandle(self, _TeacherHandle(self.scene, np.asarray(x, dtype=np.float64), self.near, self.far))

    def material(self, x) -> BrdfParams:
        x = np.asarray(x, dtype=np.float64)
        albedo, rough = self.scene.material_at(x)
        return BrdfParams(albedo, rough, self.scene.normal(x))


class _BakedHandle:
    def __init__(self, renderer: HashRenderer, x):
        self.renderer = renderer
        self.prefix = renderer.tracer_prefix(renderer.encode(x).astype(np.float32))

    def query(self, wi) -> VisibilitySample:
        v, t = self.renderer.map_trace(self.renderer.tracer_logits(self.prefix, np.asarray(wi, dtype=np.float32)))
        return VisibilitySample((v > 0.5).astype(np.float64), t.astype(np.float64))


class BakedVisibility:
    """Implicit ray tracer and BRDF decoder of a trained hash renderer."""

    def __init__(self, renderer: HashRenderer):
        self.renderer = renderer
        self.queries = 0

    def bind(self, x):
        return _CountingHandle(self, _BakedHandle(self.renderer, np.asarray(x, dtype=np.float64)))

    def material(self, x) -> BrdfParams:
        return self.renderer.decode_brdf(self.renderer.encode(x))


class _OpenHandle:
    def __init__(self, n):
        self.n = n

    def query(self, wi) -> VisibilitySample:
        shape = np.shape(wi)[:-1]
        return VisibilitySample(np.ones(shape), np.full(shape, FAR))


class Unoccluded:
    """V = 1 everywhere (furnace and MIS fixtures)."""

    queries = 0

    def bind(self, x):
        return _CountingHandle(self, _OpenHandle(len(x)))

    def material(self, x) -> BrdfParams:
        raise RuntimeError("no secondary surfaces without occlusion")


class _CountingHandle:
    def __init__(self, owner, inner):
        self.owner, self.inner = owner, inner

    def query(self, wi) -> VisibilitySample:
        self.owner.queries += int(np.prod(np.shape(wi)[:-1]))
        return self.inner.query(wi)


# --------------------------------------------------------------------------
# Sampling helpers
# --------------------------------------------------------------------------

def keyed_sphere_dirs(rng: RngStream, ids: tuple, count: int) -> np.ndarray:
    """Stratified uniform-sphere directions addressed by ``ids``: shape ids-shape + (count, 3).

    With ``count`` not a perfect square, ``count`` cells of the enclosing grid
    are picked at random per id.
    """
    rows, cols = stratum_grid(count)
    ids = tuple(np.asarray(i)[..., None] for i in ids)
    if rows * cols == count:
        cells = np.broadcast_to(np.arange(count), np.broadcast_shapes(*(i.shape for i in ids))[:-1] + (count,))
    else:
        keys = rng.split("pick").keyed(*ids, np.arange(rows * cols))
        cells = np.sort(np.argsort(keys, axis=-1, kind="stable")[..., :count], axis=-1)
    j = np.arange(count)
    u0 = rng.keyed(*ids, j, 0)
    u1 = rng.keyed(*ids, j, 1)
    s = (cells // cols + u0) / rows
    p = (cells % cols + u1) / cols
    return sphere_from_square(s, p)


def keyed_square(rng: RngStream, pid, count: int) -> np.ndarray:
    """(P, count, 2) jittered samples of the unit square, one grid cell per round.

    Cells are assigned to rounds in a per-pixel random order, so any prefix of
    rounds is still spread out and rounds stay exchangeable.
    """
    pid = np.asarray(pid)
    rows, cols = stratum_grid(count)
    if count == 1:
        cells = np.zeros((pid.size, 1), dtype=np.int64)
    else:
        keys = rng.split("cells").keyed(pid[:, None], np.arange(rows * cols)[None, :])
        cells = np.argsort(keys, axis=-1, kind="stable")[:, :count]
    j = np.arange(count)[None, :]
    u0 = (cells // cols + rng.keyed(pid[:, None], j, 0)) / rows
    u1 = (cells % cols + rng.keyed(pid[:, None], j, 1)) / cols
    return np.stack([u0, u1], axis=-1)


def _safe_div(num, den):
    ok = den > 0.0
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0)


def _finite_or_zero(c, diag: Diagnostics):
    bad = ~np.isfinite(c)
    if np.any(bad):
        diag.bump("nonfinite_contribution", int(np.sum(bad)))
        c = np.where(bad, 0.0, c)
    return c


# --------------------------------------------------------------------------
# Estimators
# --------------------------------------------------------------------------

def indirect_radiance(x, wi_shadow, t, cfg: ShadeConfig, vis, rng: RngStream, ids: tuple,
                      diag: Diagnostics | None = None, timer: Timer | None = None):
    """Outgoing radiance towards ``x`` from the secondary point ``x + t * wi_shadow``.

    Secondary rays are stratified over the sphere with pdf 1/(4 pi); backfacing
    and occluded rays are dropped without renormalising.
    """
    diag = diag if diag is not None else Diagnostics()
    t0 = time.perf_counter()
    x2 = np.asarray(x) + np.asarray(t)[..., None] * np.asarray(wi_shadow)
    p2 = vis.material(x2)
    wo2 = -np.asarray(wi_shadow)
    k = cfg.secondary_rays
    dirs = keyed_sphere_dirs(rng, ids, k)
    facing = np.einsum("pkc,pc->pk", dirs, p2.normal) > 0.0
    v2 = vis.bind(x2).query(dirs).v > 0.5
    keep = facing & v2
    diag.bump("secondary_all_rejected", int(np.sum(~keep.any(axis=1))))
    if timer is not None:
        timer.add("vis", time.perf_counter() - t0)
    t1 = time.perf_counter()
    params = BrdfParams(p2.albedo[:, None], p2.roughness[:, None], p2.normal[:, None])
    f = eval_brdf(params, dirs, wo2[:, None], cfg.diffuse, cfg.specular)
    cos = np.einsum("pkc,pc->pk", dirs, p2.normal)
    c = sample_radiance(cfg.env, dirs) * f * (cos * keep * (4.0 * math.pi))[..., None]
    out = _finite_or_zero(c, diag).sum(axis=1) / k
    if timer is not None:
        timer.add("render", time.perf_counter() - t1)
    return out


def direct_samples(point: ShadingPoint, wo, cfg: ShadeConfig, vis, rng: RngStream, pixel_ids=None,
                   diag: Diagnostics | None = None, timer: Timer | None = None, indirect: dict | None = None):
    """Per-round estimates (P, spp, 3) of outgoing radiance.

    Each round draws one light sample and one GGX visible-normal sample
    (``strategy="mis"``) and combines them with balance weights. With
    ``bounces=2`` occluded samples carry the secondary radiance instead of
    zero. ``indirect``, when given, receives the indirect share under key
    ``"radiance"``.
    """
    diag = diag if diag is not None else Diagnostics()
    timer = timer if timer is not None else Timer()
    t_start = time.perf_counter()
    p = point.x.shape[0]
    s = cfg.spp
    wo = np.asarray(wo, dtype=np.float64)
    pid = np.arange(p) if pixel_ids is None else np.asarray(pixel_ids)
    prim = rng.split(_STREAM_PRIMARY)
    u = np.concatenate([keyed_square(prim.split("light"), pid, s), keyed_square(prim.split("brdf"), pid, s)], axis=-1)

    params = BrdfParams(point.albedo[:, None], point.roughness[:, None], point.n[:, None])
    wo_b = wo[:, None]
    use_light = cfg.strategy in ("mis", "light")
    use_brdf = cfg.strategy in ("mis", "brdf")
    dirs, pdfs, radiance, weights, slots = [], [], [], [], []
    if use_light:
        d_l, pdf_l, rad_l = sample_light(cfg.cdf, u[..., 0], u[..., 1])
        w_l = mis_weight(pdf_l, pdf_ggx_vndf(wo_b, d_l, params), diag) if use_brdf else np.ones_like(pdf_l)
        dirs.append(d_l)
        pdfs.append(pdf_l)
        radiance.append(rad_l)
        weights.append(w_l)
        slots.append(_SLOT_LIGHT)
    if use_brdf:
        d_b, pdf_b, ok = sample_ggx_vndf(wo_b, params, u[..., 2], u[..., 3])
        w_b = mis_weight(pdf_b, pdf_light(cfg.cdf, d_b), diag) if use_light else np.ones_like(pdf_b)
        w_b = np.where(ok, w_b, 0.0)
        dirs.append(d_b)
        pdfs.append(pdf_b)
        radiance.append(sample_radiance(cfg.env, d_b))
        weights.append(w_b)
        slots.append(_SLOT_BRDF)
    d = np.stack(dirs, axis=2)  # (P, S, M, 3)
    pdf = np.stack(pdfs, axis=2)
    rad = np.stack(radiance, axis=2)
    w = np.stack(weights, axis=2)
    m = d.shape[2]
    timer.add("render", time.perf_counter() - t_start)

    t0 = time.perf_counter()
    vs = vis.bind(point.x).query(d.reshape(p, s * m, 3))
    v = vs.v.reshape(p, s, m) > 0.5
    timer.add("vis", time.perf_counter() - t0)

    incoming = np.where(v[..., None], rad, 0.0)
    share = None
    if cfg.bounces == 2 and not np.all(v):
        pi, si, mi = np.nonzero(~v)
        sec = indirect_radiance(point.x[pi], d[pi, si, mi], vs.t.reshape(p, s, m)[pi, si, mi], cfg, vis,
                                rng.split(_STREAM_SECONDARY), (pid[pi], si, np.asarray(slots)[mi]), diag, timer)
        incoming[pi, si, mi] = sec
        if indirect is not None:
            share = np.zeros_like(incoming)
            share[pi, si, mi] = sec

    t1 = time.perf_counter()
    f = eval_brdf(BrdfParams(point.albedo[:, None, None], point.roughness[:, None, None], point.n[:, None, None]),
                  d, wo[:, None, None], cfg.diffuse, cfg.specular)
    cos = np.einsum("psmc,pc->psm", d, point.n)
    scale = (w * _safe_div(np.maximum(cos, 0.0), pdf))[..., None] * f
    est = _finite_or_zero(incoming * scale, diag).sum(axis=2)
    if indirect is not None:
        indirect["radiance"] = (np.zeros_like(est) if share is None
                                else _finite_or_zero(share * scale, Diagnostics()).sum(axis=2))
    timer.add("render", time.perf_counter() - t1)
    return est


def direct_radiance(point: ShadingPoint, wo, cfg: ShadeConfig, vis, rng: RngStream, pixel_ids=None,
                    diag: Diagnostics | None = None):
    """Monte Carlo estimate of outgoing radiance, averaged over ``cfg.spp`` rounds."""
    return direct_samples(point, wo, cfg, vis, rng, pixel_ids, diag).mean(axis=1)


# --------------------------------------------------------------------------
# Frames
# --------------------------------------------------------------------------

@dataclass
class FrameOutput:
    radiance: np.ndarray  # (H, W, 3) linear
    aux: dict  # depth, normal, depth_gradient, albedo, mask, indirect
    gbuffer: GBuffer
    timings: dict = field(default_factory=dict)  # seconds per stage
    diagnostics: dict = field(default_factory=dict)


def shade_frame(surface, vis, cfg: ShadeConfig, camera: Camera, seed: int = 0,
                albedo_scale=None) -> FrameOutput:
    """Render one frame: G-buffer from ``surface``, then per-pixel shading.

    Pixels with mask <= 0.5 show the environment along the primary ray.
    """
    from .svgf import depth_gradient

    timer = Timer()
    t0 = time.perf_counter()
    gb = surface.surface(camera)
    timer.add("model", time.perf_counter() - t0)

    h, w = gb.shape
    _, dirs = camera.rays((w, h))
    radiance = sample_radiance(cfg.env, dirs.reshape(-1, 3)).reshape(h, w, 3)
    indirect = np.zeros((h, w, 3))
    albedo = gb.albedo if albedo_scale is None else np.clip(gb.albedo * np.asarray(albedo_scale), 0.0, 1.0)
    fg = gb.mask.reshape(-1) > 0.5
    rng = RngStream(seed)
    diag = Diagnostics()

    tiles = []
    for r0 in range(0, h, cfg.tile_rows):
        rows = np.arange(r0 * w, min(h, r0 + cfg.tile_rows) * w)
        rows = rows[fg[rows]]
        if rows.size:
            tiles.append(rows)

    def run(idx):
        tdiag, ttimer, share = Diagnostics(), Timer(), {}
        point = ShadingPoint(gb.coord.reshape(-1, 3)[idx], gb.normal.reshape(-1, 3)[idx],
                             albedo.reshape(-1, 3)[idx], gb.roughness.reshape(-1)[idx])
        est = direct_samples(point, -dirs.reshape(-1, 3)[idx], cfg, vis, rng, idx, tdiag, ttimer, share)
        return idx, est.mean(axis=1), share["radiance"].mean(axis=1), tdiag, ttimer

    if cfg.threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(run, tiles))
    else:
        results = [run(t) for t in tiles]
    flat = radiance.reshape(-1, 3)
    flat_ind = indirect.reshape(-1, 3)
    for idx, est, ind, tdiag, ttimer in results:
        flat[idx] = est
        flat_ind[idx] = ind
        for k, v in tdiag.items():
            diag.bump(k, v)
        for k, v in ttimer.items():
            timer.add(k, v)

    aux = {"depth": gb.depth, "normal": gb.normal, "depth_gradient": depth_gradient(gb.depth),
           "albedo": albedo, "mask": gb.mask, "indirect": indirect}
    return FrameOutput(radiance, aux, gb, dict(timer), dict(diag))


def albedo_rescale(pred, ref, mask):
    """Per-channel global scale matching masked means, and the clamped rescaled map."""
    import warnings

    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    num = np.mean(ref * m, axis=tuple(range(ref.ndim - 1)))
    den = np.mean(pred * m, axis=tuple(range(pred.ndim - 1)))
    if np.any(den == 0.0):
        warnings.warn("zero masked albedo mean; using scale 1", stacklevel=2)
    scale = np.where(den != 0.0, num / np.where(den != 0.0, den, 1.0), 1.0)
    return scale, np.clip(pred * scale, 0.0, 1.0)
