"""Vector helpers, orthonormal bases and deterministic stratified sampling.

Every function here works on numpy arrays with the vector in the last axis,
so a single point and a batch of a million points go through the same code.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def dot(a, b):
    return np.sum(a * b, axis=-1)


def norm(v):
    return np.sqrt(dot(v, v))


def normalize(v, eps: float = 0.0):
    n = norm(v)[..., None]
    if eps:
        n = np.maximum(n, eps)
    return v / n


def reflect(v, h):
    """Mirror ``v`` about ``h`` (both pointing away from the surface)."""
    return 2.0 * dot(v, h)[..., None] * h - v


# --------------------------------------------------------------------------
# Counter based RNG
# --------------------------------------------------------------------------

def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; uint64 arithmetic wraps
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix_scalar(z: int) -> int:
    return int(_mix64(np.array([z & _MASK64], dtype=np.uint64))[0])


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.blake2b(str(tag).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _to_unit(z: np.ndarray) -> np.ndarray:
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass
class RngStream:
    """Counter based generator: output ``i`` is a pure hash of ``(seed, i)``.

    ``split`` derives independent child streams from arbitrary tags, and
    ``keyed`` draws values addressed by explicit index arrays (pixel, sample,
    dimension, ...) so that parallel or reordered evaluation reproduces the
    exact same numbers.
    """

    seed: int
    counter: int = 0
    _key: int = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self._key = _mix_scalar(self.seed ^ _GOLDEN)

    def split(self, *tags) -> "RngStream":
        key = self._key
        for t in tags:
            key = _mix_scalar(key ^ ((_tag_to_int(t) * _GOLDEN + 0x632BE59BD9B4E019) & _MASK64))
        return RngStream(key)

    def uniform(self, size) -> np.ndarray:
        n = int(np.prod(size))
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        out = _to_unit(_mix64(idx * np.uint64(_GOLDEN) ^ np.uint64(self._key)))
        return out.reshape(size)

    def keyed(self, *indices) -> np.ndarray:
        """Uniforms in [0, 1) addressed by broadcastable integer index arrays."""
        arrays = np.broadcast_arrays(*[np.asarray(i, dtype=np.uint64) for i in indices])
        h = np.full(arrays[0].shape, self._key, dtype=np.uint64)
        for a in arrays:
            h = _mix64(h ^ (a * np.uint64(_GOLDEN) + np.uint64(0x632BE59BD9B4E019)))
        return _to_unit(h)

    def integers(self, high: int, size) -> np.ndarray:
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


# --------------------------------------------------------------------------
# Rays and bases
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(float(norm(d)) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")

    def at(self, t):
        return np.asarray(self.origin) + t * np.asarray(self.direction)


@dataclass(frozen=True)
class OrthonormalBasis:
    tangent: np.ndarray
    bitangent: np.ndarray
    normal: np.ndarray

    def to_world(self, v):
        v = np.asarray(v)
        return v[..., 0:1] * self.tangent + v[..., 1:2] * self.bitangent + v[..., 2:3] * self.normal

    def to_local(self, v):
        v = np.asarray(v)
        return np.stack([dot(v, self.tangent), dot(v, self.bitangent), dot(v, self.normal)], axis=-1)


def onb_frames(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tangent/bitangent for a batch of unit normals, shape (..., 3) each.

    The helper axis is the coordinate axis where |n| is smallest, which keeps
    the cross product well conditioned for every input direction.
    """
    n = np.asarray(n, dtype=np.float64)
    a = np.abs(n)
    axis = np.argmin(a, axis=-1)
    helper = np.zeros_like(n)
    np.put_along_axis(helper, axis[..., None], 1.0, axis=-1)
    t = normalize(np.cross(helper, n))
    b = np.cross(n, t)
    return t, b


def build_onb(n) -> OrthonormalBasis:
    n = np.asarray(n, dtype=np.float64)
    length = float(norm(n))
    if length < 1e-12:
        raise ValueError("degenerate normal")
    n = n / length
    t, b = onb_frames(n)
    return OrthonormalBasis(t, b, n)


def to_world(local: np.ndarray, t: np.ndarray, b: np.ndarray, n: np.ndarray) -> np.ndarray:
    return local[..., 0:1] * t + local[..., 1:2] * b + local[..., 2:3] * n


def to_local(v: np.ndarray, t: np.ndarray, b: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.stack([dot(v, t), dot(v, b), dot(v, n)], axis=-1)


# --------------------------------------------------------------------------
# Stratified directions
# --------------------------------------------------------------------------

def stratum_grid(count: int) -> tuple[int, int]:
    side = math.isqrt(count)
    if side * side < count:
        side += 1
    return side, side


def stratified_unit_square(count: int, u: np.ndarray, pick: np.ndarray | None = None):
    """Jittered points, one per cell of a row-major ``side x side`` grid.

    ``u`` holds uniforms of shape (..., count, 2). When the grid has more
    cells than ``count`` the cells in ``pick`` (shape (..., count)) are used,
    otherwise the first ``count`` cells.
    """
    rows, cols = stratum_grid(count)
    cells = np.arange(count) if pick is None else pick
    r = cells // cols
    c = cells % cols
    s = (r + u[..., 0]) / rows
    p = (c + u[..., 1]) / cols
    return s, p


def _cell_pick(count: int, rng: RngStream, batch: tuple = ()) -> np.ndarray | None:
    rows, cols = stratum_grid(count)
    if rows * cols == count:
        return None
    keys = rng.uniform(batch + (rows * cols,))
    return np.sort(np.argsort(keys, axis=-1, kind="stable")[..., :count], axis=-1)


def sphere_from_square(s, p):
    """(s, p) in [0,1)^2 to the unit sphere, uniform in (cos theta, phi)."""
    z = 1.0 - 2.0 * s
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * p
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def hemisphere_from_square(s, p):
    z = 1.0 - s
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * p
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def stratified_sphere_dirs(count: int, rng: RngStream) -> np.ndarray:
    """``count`` jittered directions over the whole sphere; pdf 1/(4 pi)."""
    if count <= 0:
        return np.zeros((0, 3))
    pick = _cell_pick(count, rng)
    s, p = stratified_unit_square(count, rng.uniform((count, 2)), pick)
    return sphere_from_square(s, p)


def stratified_hemisphere_dirs(count: int, n, rng: RngStream) -> np.ndarray:
    """``count`` jittered directions on the hemisphere around ``n``; pdf 1/(2 pi)."""
    if count <= 0:
        return np.zeros((0, 3))
    basis = build_onb(n)
    pick = _cell_pick(count, rng)
    s, p = stratified_unit_square(count, rng.uniform((count, 2)), pick)
    local = hemisphere_from_square(s, p)
    # s in [0,1) maps to z in (0,1]; keep strictly positive
    local[..., 2] = np.maximum(local[..., 2], 1e-12)
    return basis.to_world(local)


def stratified_sphere_batch(npoints: int, count: int, rng: RngStream) -> np.ndarray:
    """Independent stratified sphere sets for ``npoints`` points: (npoints, count, 3)."""
    pick = _cell_pick(count, rng, (npoints,))
    s, p = stratified_unit_square(count, rng.uniform((npoints, count, 2)), pick)
    return sphere_from_square(s, p)


UNIFORM_SPHERE_PDF = 1.0 / (4.0 * math.pi)
UNIFORM_HEMISPHERE_PDF = 1.0 / (2.0 * math.pi)
