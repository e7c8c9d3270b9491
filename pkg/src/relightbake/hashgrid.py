"""Baked indirect model: multiresolution hash encoder, BRDF decoder and implicit ray tracer.

The encoder maps a world point to a feature ``f``. Two small MLPs read it:
the BRDF decoder returns (normal, albedo, roughness) and the implicit ray
tracer, given ``f`` and a direction, returns a visibility logit and the
normalised hit depth between ``near`` and ``far``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .brdf import ROUGHNESS_MAX, ROUGHNESS_MIN, BrdfParams
from .geom import RngStream
from .nn import MLP, Module, Param, gelu, sigmoid
from .scene import FAR, NEAR

R_SPAN = ROUGHNESS_MAX - ROUGHNESS_MIN
TABLE_INIT = 1e-4


@dataclass
class HashConfig:
    levels: int = 14
    table_log2: int = 17
    feature_dim: int = 2
    n_min: int = 16
    n_max: int = 131072
    hidden: int = 64
    near: float = NEAR
    far: float = FAR

    @classmethod
    def desk(cls) -> "HashConfig":
        return cls(table_log2=14, n_max=1024)

    @classmethod
    def from_dict(cls, d: dict) -> "HashConfig":
        return cls(**{k: d[k] for k in asdict(cls()) if k in d})

    def to_dict(self) -> dict:
        return asdict(self)


def level_resolutions(levels: int, n_min: int, n_max: int) -> np.ndarray:
    if levels == 1:
        return np.array([n_min], dtype=np.int64)
    b = math.exp((math.log(n_max) - math.log(n_min)) / (levels - 1))
    res = [int(math.floor(n_min * b ** lev * (1.0 + 1e-12))) for lev in range(levels)]
    return np.array(res, dtype=np.int64)


class HashGridEncoder(Module):
    def __init__(self, cfg: HashConfig, aabb_min, aabb_max, rng: RngStream):
        self.cfg = cfg
        tsize = 1 << cfg.table_log2
        self.resolutions = level_resolutions(cfg.levels, cfg.n_min, cfg.n_max)
        self.dense = ((self.resolutions + 1) ** 3 <= tsize).astype(np.uint8)
        self.aabb_min = np.asarray(aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(aabb_max, dtype=np.float64)
        init = (rng.uniform((cfg.levels, tsize, cfg.feature_dim)) * 2.0 - 1.0) * TABLE_INIT
        # hash tables are excluded from weight decay
        self.tables = Param(init.astype(np.float32), decay=False)
        self._warned = False

    @property
    def out_dim(self) -> int:
        return self.cfg.levels * self.cfg.feature_dim

    def normalize(self, x) -> np.ndarray:
        xn = (np.asarray(x, dtype=np.float64) - self.aabb_min) / (self.aabb_max - self.aabb_min)
        if not self._warned and (np.any(xn < -1e-9) or np.any(xn > 1 + 1e-9)):
            warnings.warn("points outside the scene AABB were clamped", stacklevel=3)
            self._warned = True
        return np.clip(xn, 0.0, 1.0)

    def forward(self, x):
        xn = self.normalize(np.asarray(x).reshape(-1, 3))
        feats, self._idx, self._wts = kernels.hash_encode(xn, self.tables.value, self.resolutions, self.dense)
        return feats.astype(self.tables.value.dtype, copy=False)

    def infer(self, x):
        """Forward without keeping the corner indices and weights for a backward pass."""
        xn = self.normalize(np.asarray(x).reshape(-1, 3))
        feats, _, _ = kernels.hash_encode(xn, self.tables.value, self.resolutions, self.dense, with_backward=False)
        return feats.astype(self.tables.value.dtype, copy=False)

    def backward(self, g):
        grad = kernels.hash_scatter(g, self._idx, self._wts, self.tables.value.shape)
        self.tables.grad += grad.astype(self.tables.grad.dtype, copy=False)
        return None


def normalize_with_grad(raw: np.ndarray):
    """Unit vector of ``raw`` plus the closure mapping d(unit) to d(raw)."""
    length = np.sqrt(np.sum(raw * raw, axis=-1, keepdims=True))
    n = raw / np.maximum(length, 1e-12)

    def back(g):
        return (g - n * np.sum(n * g, axis=-1, keepdims=True)) / np.maximum(length, 1e-12)

    return n, back


def map_brdf(raw: np.ndarray):
    """Decoder head mapping: (normal unit, albedo sigmoid, roughness in [0.09, 1])."""
    length = np.linalg.norm(raw[..., 0:3], axis=-1, keepdims=True)
    if np.any(length == 0.0):
        raise ValueError("degenerate normal prediction")
    n = raw[..., 0:3] / length
    a = sigmoid(raw[..., 3:6])
    r = ROUGHNESS_MIN + R_SPAN * sigmoid(raw[..., 6])
    return n, a, r


class HashRenderer(Module):
    def __init__(self, cfg: HashConfig, aabb_min, aabb_max, rng: RngStream):
        self.cfg = cfg
        self.encoder = HashGridEncoder(cfg, aabb_min, aabb_max, rng.split("tables"))
        fdim = self.encoder.out_dim
        self.brdf = MLP([fdim, cfg.hidden, cfg.hidden, 7], rng.split("brdf"))
        self.tracer = MLP([fdim + 3, cfg.hidden, cfg.hidden, 2], rng.split("tracer"))

    # ---- inference -----------------------------------------------------
    def encode(self, x) -> np.ndarray:
        x = np.asarray(x)
        return self.encoder.infer(x.reshape(-1, 3)).reshape(x.shape[:-1] + (self.encoder.out_dim,))

    def decode_brdf(self, f) -> BrdfParams:
        n, a, r = map_brdf(_mlp_infer(self.brdf, f))
        return BrdfParams(a, r, n)

    def tracer_prefix(self, f) -> np.ndarray:
        """Feature half of the tracer's first layer; reused for every direction at a point."""
        lin = self.tracer.layers[0]
        fdim = self.encoder.out_dim
        return f @ lin.weight.value[:fdim] + lin.bias.value

    def tracer_logits(self, prefix, wi) -> np.ndarray:
        """Raw (visibility, depth) logits for directions ``wi`` (..., K, 3) or (..., 3)."""
        lin = self.tracer.layers
        fdim = self.encoder.out_dim
        wi = np.asarray(wi, dtype=prefix.dtype)
        if prefix.dtype == np.float32 and len(lin) == 3:
            single = wi.ndim == prefix.ndim
            flat_pre = prefix.reshape(-1, prefix.shape[-1])
            flat_wi = wi.reshape(flat_pre.shape[0], -1, 3)
            out = kernels.tracer_infer(flat_pre, flat_wi, lin[0].weight.value[fdim:], lin[1].weight.value,
                                       lin[1].bias.value, lin[2].weight.value, lin[2].bias.value)
            lead = prefix.shape[:-1] if single else wi.shape[:-1]
            return out.reshape(lead + (out.shape[-1],))
        if wi.ndim == prefix.ndim + 1:
            prefix = prefix[..., None, :]
        h = gelu(prefix + wi @ lin[0].weight.value[fdim:])
        for layer in lin[1:-1]:
            h = gelu(h @ layer.weight.value + layer.bias.value)
        return h @ lin[-1].weight.value + lin[-1].bias.value

    def map_trace(self, logits):
        v = sigmoid(logits[..., 0])
        t = self.cfg.near + (self.cfg.far - self.cfg.near) * sigmoid(logits[..., 1])
        return v, t

    def trace_implicit(self, f, wi):
        """Soft visibility in [0, 1] and depth in [near, far]; threshold ``v > 0.5`` for hard visibility."""
        return self.map_trace(self.tracer_logits(self.tracer_prefix(np.asarray(f, dtype=np.float32)), wi))

    def query(self, x, wi):
        f = self.encode(x)
        v, t = self.trace_implicit(f, wi)
        return (v > 0.5).astype(np.float64), t.astype(np.float64)

    def state_dict(self):
        return super().state_dict()


def secondary_point(x, wi, t) -> np.ndarray:
    return np.asarray(x) + np.asarray(t)[..., None] * np.asarray(wi)


def _mlp_infer(mlp: MLP, x) -> np.ndarray:
    x = np.asarray(x, dtype=mlp.layers[0].weight.value.dtype)
    for layer in mlp.layers[:-1]:
        x = gelu(x @ layer.weight.value + layer.bias.value)
    return x @ mlp.layers[-1].weight.value + mlp.layers[-1].bias.value
