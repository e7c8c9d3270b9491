"""Analytic SDF scenes used as the ground-truth teacher.

Scenes are unions of exact sphere / box / plane distance functions, so the
scene SDF is 1-Lipschitz and sphere tracing gives exact surface, visibility
and secondary-depth oracles.

Scene files are plain text::

    # comment
    [scene]
    name = spheres
    aabb_min = -2 -1 -2        # optional unless the scene has planes
    aabb_max = 2 2 2

    [sphere]
    center = 0 0 0
    radius = 1
    albedo = 0.8 0.2 0.2
    roughness = 0.4

    [box]
    center = 0 -1 0
    half_extents = 1 0.05 1
    material = checker          # constant (default) | checker
    albedo_a = 0.9 0.9 0.9
    albedo_b = 0.2 0.2 0.2
    checker_scale = 4
    roughness = 0.7

    [plane]
    normal = 0 1 0              # surface is {x : normal . x = offset}
    offset = -1
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .geom import RngStream, normalize
from .pfm import read_pfm, write_pfm

EPS_HIT = 1e-4
MAX_STEPS = 256
NORMAL_H = 1e-4
NEAR = 0.05
FAR = 1.5

_KINDS = {"sphere": 0, "box": 1, "plane": 2}


@dataclass
class Material:
    albedo: np.ndarray
    roughness: float
    checker: bool = False
    albedo_b: np.ndarray | None = None
    checker_scale: float = 1.0

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        if not self.checker:
            return np.broadcast_to(self.albedo, x.shape).copy()
        cells = np.floor(x * self.checker_scale).astype(np.int64).sum(axis=-1)
        even = (cells % 2 == 0)[..., None]
        return np.where(even, self.albedo, self.albedo_b)


@dataclass
class Primitive:
    shape: str
    params: np.ndarray  # 6 floats, see _pykernels
    material: Material

    def bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self.shape == "sphere":
            c, r = self.params[:3], self.params[3]
            return c - r, c + r
        if self.shape == "box":
            c, h = self.params[:3], self.params[3:6]
            return c - h, c + h
        return None


@dataclass
class SdfScene:
    primitives: list[Primitive]
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    name: str = "scene"
    kinds: np.ndarray = field(init=False, repr=False)
    params: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene has no primitives")
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64)
        self.kinds = np.array([_KINDS[p.shape] for p in self.primitives], dtype=np.int32)
        self.params = np.stack([p.params for p in self.primitives]).astype(np.float64)
        for p in self.primitives:
            b = p.bounds()
            if b is not None and (np.any(b[0] < self.aabb_min - 1e-9) or np.any(b[1] > self.aabb_max + 1e-9)):
                raise ValueError(f"{p.shape} primitive leaves the scene bounds")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.aabb_min + self.aabb_max)

    @property
    def radius(self) -> float:
        return float(0.5 * np.linalg.norm(self.aabb_max - self.aabb_min))

    def sdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        d, _ = kernels.scene_sdf(self.kinds, self.params, x.reshape(-1, 3))
        return d.reshape(x.shape[:-1])

    def nearest(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        _, i = kernels.scene_sdf(self.kinds, self.params, x.reshape(-1, 3))
        return i.reshape(x.shape[:-1])

    def normal(self, x, h: float = NORMAL_H) -> np.ndarray:
        """Central-difference SDF gradient, normalised."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        grads = []
        for axis in range(3):
            off = np.zeros(3)
            off[axis] = h
            grads.append(self.sdf(flat + off) - self.sdf(flat - off))
        g = np.stack(grads, axis=-1)
        return normalize(g, 1e-20).reshape(x.shape)

    def material_at(self, x, prim=None) -> tuple[np.ndarray, np.ndarray]:
        """(albedo (...,3), roughness (...)) of the nearest primitive at ``x``."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        prim = self.nearest(flat) if prim is None else np.asarray(prim).reshape(-1)
        albedo = np.zeros_like(flat)
        rough = np.zeros(flat.shape[0])
        for i, p in enumerate(self.primitives):
            sel = prim == i
            if np.any(sel):
                albedo[sel] = p.material.evaluate(flat[sel])
                rough[sel] = p.material.roughness
        return albedo.reshape(x.shape), rough.reshape(x.shape[:-1])

    def normalize_points(self, x) -> np.ndarray:
        return (np.asarray(x) - self.aabb_min) / (self.aabb_max - self.aabb_min)


# --------------------------------------------------------------------------
# Scene files
# --------------------------------------------------------------------------

def _vec(s: str) -> np.ndarray:
    return np.array([float(t) for t in s.split()], dtype=np.float64)


def parse_scene(text: str, name: str = "scene") -> SdfScene:
    sections: list[tuple[str, dict]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1].strip().lower(), {}))
            continue
        if "=" not in line or not sections:
            raise ValueError(f"scene line {lineno}: expected 'key = value' inside a section")
        key, value = (s.strip() for s in line.split("=", 1))
        sections[-1][1][key] = value
    header = {}
    prims = []
    for kind, kv in sections:
        if kind == "scene":
            header = kv
            continue
        if kind not in _KINDS:
            raise ValueError(f"unknown section [{kind}]")
        prims.append(_make_primitive(kind, kv))
    if "aabb_min" in header and "aabb_max" in header:
        lo, hi = _vec(header["aabb_min"]), _vec(header["aabb_max"])
    else:
        bounds = [p.bounds() for p in prims]
        if any(b is None for b in bounds):
            raise ValueError("scenes with planes need an explicit aabb_min/aabb_max")
        lo = np.min([b[0] for b in bounds], axis=0)
        hi = np.max([b[1] for b in bounds], axis=0)
        pad = 0.02 * np.max(hi - lo)
        lo, hi = lo - pad, hi + pad
    return SdfScene(prims, lo, hi, name=header.get("name", name))


def _make_primitive(kind: str, kv: dict) -> Primitive:
    prm = np.zeros(6)
    if kind == "sphere":
        prm[:3] = _vec(kv["center"])
        prm[3] = float(kv["radius"])
        if prm[3] <= 0:
            raise ValueError("sphere radius must be positive")
    elif kind == "box":
        prm[:3] = _vec(kv["center"])
        prm[3:6] = _vec(kv["half_extents"])
        if np.any(prm[3:6] <= 0):
            raise ValueError("box half extents must be positive")
    else:
        n = _vec(kv["normal"])
        prm[:3] = n / np.linalg.norm(n)
        prm[3] = float(kv.get("offset", 0.0))
    rough = float(kv.get("roughness", 0.5))
    if kv.get("material", "constant") == "checker":
        mat = Material(_vec(kv["albedo_a"]), rough, checker=True, albedo_b=_vec(kv["albedo_b"]),
                       checker_scale=float(kv.get("checker_scale", 1.0)))
    else:
        mat = Material(_vec(kv.get("albedo", "0.8 0.8 0.8")), rough)
    return Primitive(kind, prm, mat)


BUNDLED_SCENES = ("spheres", "occluder-pair", "cornell-sdf")


def load_scene(path_or_name: str) -> SdfScene:
    """Load a scene file, or one of the bundled scenes by name."""
    if path_or_name in BUNDLED_SCENES:
        text = resources.files("relightbake").joinpath("scenes").joinpath(f"{path_or_name}.scene").read_text()
        return parse_scene(text, path_or_name)
    if not os.path.exists(path_or_name):
        raise FileNotFoundError(f"scene file not found: {path_or_name}")
    return parse_scene(Path(path_or_name).read_text(), Path(path_or_name).stem)


# --------------------------------------------------------------------------
# Tracing
# --------------------------------------------------------------------------

@dataclass
class TraceResult:
    hit: np.ndarray
    x: np.ndarray
    t: np.ndarray
    n: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    steps: np.ndarray
    unconverged: int = 0


def trace_rays(scene: SdfScene, origins, dirs, t_min=0.0, t_max=np.inf, eps=EPS_HIT,
               max_steps=MAX_STEPS, shade: bool = True) -> TraceResult:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t, hit, prim, steps = kernels.sphere_trace(scene.kinds, scene.params, origins, dirs,
                                               t_min, t_max, eps, max_steps)
    x = origins + t[:, None] * dirs
    n = np.zeros_like(x)
    albedo = np.zeros_like(x)
    rough = np.zeros(x.shape[0])
    if shade and np.any(hit):
        n[hit] = scene.normal(x[hit])
        albedo[hit], rough[hit] = scene.material_at(x[hit], prim[hit])
    tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), t.shape)
    unconverged = int(np.sum(~hit & (steps >= max_steps) & (t <= tmax)))
    return TraceResult(hit, x, t, n, albedo, rough, steps, unconverged)


def sphere_trace(scene: SdfScene, origin, direction, t_min=0.0, t_max=np.inf, eps=EPS_HIT,
                 max_steps=MAX_STEPS) -> TraceResult:
    """Single-ray convenience wrapper around ``trace_rays``; fields are scalars/3-vectors."""
    r = trace_rays(scene, np.asarray(origin)[None], np.asarray(direction)[None], t_min, t_max, eps, max_steps)
    return TraceResult(bool(r.hit[0]), r.x[0], float(r.t[0]), r.n[0], r.albedo[0], float(r.roughness[0]),
                       r.steps[0], r.unconverged)


@dataclass
class VisibilitySample:
    v: np.ndarray  # 1 visible, 0 occluded
    t: np.ndarray  # secondary depth in [near, far]


def visibility_depth(scene: SdfScene, x, wi, near=NEAR, far=FAR, eps=EPS_HIT,
                     max_steps=MAX_STEPS) -> VisibilitySample:
    """Hard visibility and clipped hit distance from surface points ``x`` along ``wi``."""
    x = np.asarray(x, dtype=np.float64)
    wi = np.asarray(wi, dtype=np.float64)
    shape = np.broadcast_shapes(x.shape, wi.shape)[:-1]
    xo = np.broadcast_to(x, shape + (3,)).reshape(-1, 3) + near * np.broadcast_to(wi, shape + (3,)).reshape(-1, 3)
    d = np.broadcast_to(wi, shape + (3,)).reshape(-1, 3)
    t, hit, _, _ = kernels.sphere_trace(scene.kinds, scene.params, xo, d, 0.0, far - near, eps, max_steps)
    depth = np.where(hit, np.clip(t + near, near, far), far)
    return VisibilitySample(np.where(hit, 0.0, 1.0).reshape(shape), depth.reshape(shape))


# --------------------------------------------------------------------------
# Cameras and G-buffers
# --------------------------------------------------------------------------

@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    vfov: float = 40.0
    resolution: tuple[int, int] = (128, 128)  # (w, h)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if not 0.0 < self.vfov < 180.0:
            raise ValueError("vertical fov must be in (0, 180) degrees")
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))

    def frame(self):
        fwd = normalize(self.look_at - self.position)
        right = np.cross(fwd, self.up)
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("camera up vector is parallel to the view direction")
        right = right / np.linalg.norm(right)
        return fwd, right, np.cross(right, fwd)

    def rays(self, resolution: tuple[int, int] | None = None):
        """Origins broadcast and unit directions (H, W, 3) through pixel centers, row 0 at the top."""
        w, h = resolution or self.resolution
        fwd, right, up = self.frame()
        tan_h = math.tan(math.radians(self.vfov) / 2.0)
        aspect = w / h
        xs = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * tan_h * aspect
        ys = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * tan_h
        d = fwd + xs[None, :, None] * right + ys[:, None, None] * up
        return np.broadcast_to(self.position, (h, w, 3)), normalize(d)

    def with_resolution(self, w: int, h: int) -> "Camera":
        return Camera(self.position, self.look_at, self.up, self.vfov, (w, h))

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "look_at": self.look_at.tolist(), "up": self.up.tolist(),
                "vfov": self.vfov, "resolution": list(self.resolution)}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["position"]), np.array(d["look_at"]), np.array(d["up"]), d["vfov"],
                   tuple(d["resolution"]))


def primary_far(scene: SdfScene, camera: Camera) -> float:
    return float(np.linalg.norm(camera.position - scene.center) + scene.radius)


@dataclass
class GBuffer:
    albedo: np.ndarray  # (H, W, 3)
    roughness: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3), zero on background
    coord: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W)

    PLANES = ("albedo", "roughness", "normal", "coord", "mask", "depth")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def save(self, directory, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in self.PLANES:
            write_pfm(directory / f"{name}.pfm", getattr(self, name))
        manifest = {"planes": {n: f"{n}.pfm" for n in self.PLANES}, "height": self.shape[0],
                    "width": self.shape[1]}
        manifest.update(extra or {})
        (directory / "gbuffer.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "GBuffer":
        directory = Path(directory)
        manifest = json.loads((directory / "gbuffer.json").read_text())
        planes = {n: read_pfm(directory / manifest["planes"][n]).astype(np.float64) for n in cls.PLANES}
        return cls(**planes)


def trace_gbuffer(scene: SdfScene, camera: Camera, resolution: tuple[int, int] | None = None) -> GBuffer:
    origins, dirs = camera.rays(resolution)
    h, w = dirs.shape[:2]
    far = primary_far(scene, camera)
    r = trace_rays(scene, origins.reshape(-1, 3), dirs.reshape(-1, 3), 0.0, far)
    hit = r.hit
    bg = np.clip(camera.position + far * dirs.reshape(-1, 3), scene.aabb_min, scene.aabb_max)
    coord = np.where(hit[:, None], r.x, bg)
    depth = np.where(hit, r.t, far)
    return GBuffer(
        albedo=r.albedo.reshape(h, w, 3),
        roughness=np.where(hit, r.roughness, 0.0).reshape(h, w),
        normal=r.n.reshape(h, w, 3),
        coord=coord.reshape(h, w, 3),
        mask=hit.astype(np.float64).reshape(h, w),
        depth=depth.reshape(h, w),
    )


# --------------------------------------------------------------------------
# Pose sampling
# --------------------------------------------------------------------------

def _pose_dir(p, center) -> np.ndarray:
    if isinstance(p, Camera):
        p = p.position
    return normalize(np.asarray(p, dtype=np.float64) - center)


def angular_distance(a, b) -> float:
    return math.degrees(math.acos(float(np.clip(np.dot(a, b), -1.0, 1.0))))


def sample_hemisphere_pose(radius: float, elevation_range, rng: RngStream, reject=(), min_angle: float = 1.0,
                           center=(0.0, 0.0, 0.0), vfov: float = 40.0,
                           resolution=(128, 128), max_tries: int = 1000) -> Camera:
    """Camera on the upper hemisphere (area-uniform between two elevations) looking at ``center``.

    Any pose within ``min_angle`` degrees of a pose in ``reject`` (Cameras or
    positions) is redrawn.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    lo, hi = (math.radians(e) for e in elevation_range)
    rejects = [_pose_dir(p, center) for p in reject]
    for _ in range(max_tries):
        u1, u2 = rng.uniform(2)
        sin_el = math.sin(lo) + u1 * (math.sin(hi) - math.sin(lo))
        cos_el = math.sqrt(max(0.0, 1.0 - sin_el * sin_el))
        az = 2.0 * math.pi * u2
        direction = np.array([cos_el * math.sin(az), sin_el, cos_el * math.cos(az)])
        if any(angular_distance(direction, r) < min_angle for r in rejects):
            continue
        return Camera(center + radius * direction, center, vfov=vfov, resolution=resolution)
    raise RuntimeError("pose space exhausted")
