"""Pseudo-data extraction and the two distillation loops."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .cnn import DirectRenderer, build_raymap
from .geom import RngStream, stratified_sphere_batch
from .hashgrid import R_SPAN, HashRenderer, normalize_with_grad
from .brdf import ROUGHNESS_MIN
from .scene import (Camera, GBuffer, SdfScene, sample_hemisphere_pose, trace_gbuffer, trace_rays,
                    visibility_depth)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


# --------------------------------------------------------------------------
# Pseudo dataset
# --------------------------------------------------------------------------

@dataclass
class PoseSampling:
    radius: float = 3.5
    elevation: tuple[float, float] = (5.0, 75.0)
    min_angle: float = 1.0
    vfov: float = 40.0
    resolution: tuple[int, int] = (128, 128)


@dataclass
class PseudoDataset:
    cameras: list[Camera]
    gbuffers: list[GBuffer]
    manifest: dict

    def __len__(self) -> int:
        return len(self.cameras)

    def manifest_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest, sort_keys=True).encode()).hexdigest()

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, g in enumerate(self.gbuffers):
            g.save(directory / f"pose_{i:05d}")
        (directory / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "PseudoDataset":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        cams = [Camera.from_dict(p["camera"]) for p in manifest["poses"]]
        gbs = [GBuffer.load(directory / f"pose_{i:05d}") for i in range(len(cams))]
        return cls(cams, gbs, manifest)


def default_train_poses(scene: SdfScene, count: int, seed: int, sampling: PoseSampling | None = None) -> list[Camera]:
    sampling = sampling or PoseSampling()
    rng = RngStream(seed).split("train-poses")
    poses: list[Camera] = []
    for _ in range(count):
        poses.append(sample_hemisphere_pose(sampling.radius, sampling.elevation, rng, reject=poses,
                                            min_angle=sampling.min_angle, center=scene.center,
                                            vfov=sampling.vfov, resolution=sampling.resolution))
    return poses


def build_pseudo_dataset(scene: SdfScene, n_random: int, train_poses: list[Camera], test_poses: list[Camera],
                         rng: RngStream, sampling: PoseSampling | None = None) -> PseudoDataset:
    """Teacher G-buffers for the training poses plus ``n_random`` fresh hemisphere poses.

    Random poses are redrawn when closer than ``min_angle`` to any training or
    test pose.
    """
    sampling = sampling or PoseSampling()
    reject = list(train_poses) + list(test_poses)
    cams = list(train_poses)
    kinds = ["train"] * len(train_poses)
    for _ in range(n_random):
        cams.append(sample_hemisphere_pose(sampling.radius, sampling.elevation, rng, reject=reject,
                                           min_angle=sampling.min_angle, center=scene.center,
                                           vfov=sampling.vfov, resolution=sampling.resolution))
        kinds.append("random")
    gbs = [trace_gbuffer(scene, c) for c in cams]
    manifest = {
        "scene": scene.name,
        "seed": rng.seed,
        "n_random": n_random,
        "sampling": asdict(sampling),
        "poses": [{"kind": k, "camera": c.to_dict()} for k, c in zip(kinds, cams)],
        "test_poses": [c.to_dict() for c in test_poses],
    }
    return PseudoDataset(cams, gbs, manifest)


# --------------------------------------------------------------------------
# Loss traces
# --------------------------------------------------------------------------

@dataclass
class LossTrace:
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def append(self, step: int, parts: dict, lr: float) -> None:
        self.rows.append([step] + [parts[c] for c in self.columns[1:-1]] + [lr])

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def to_csv(self, path, append: bool = False) -> None:
        path = Path(path)
        new = not append or not path.exists()
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(self.columns)
            for r in self.rows:
                w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])


# --------------------------------------------------------------------------
# CNN renderer
# --------------------------------------------------------------------------

@dataclass
class CnnTrainConfig:
    poses_per_batch: int = 64
    steps: int = 3000
    lr0: float = 5e-4
    weights: dict = field(default_factory=lambda: {"albedo": 1.0, "normal": 1.0, "roughness": 1.0,
                                                   "coord": 1.0, "mask": 1.0})


CNN_LOSSES = ("albedo", "normal", "roughness", "coord", "mask")


def cnn_targets(model: DirectRenderer, gbuffers: list[GBuffer]) -> dict:
    extent = model.aabb_max - model.aabb_min
    return {
        "albedo": np.stack([g.albedo for g in gbuffers]).astype(np.float32),
        "normal": np.stack([g.normal for g in gbuffers]).astype(np.float32),
        "roughness": np.stack([g.roughness for g in gbuffers]).astype(np.float32),
        "coord": np.stack([(g.coord - model.aabb_min) / extent for g in gbuffers]).astype(np.float32),
        "mask": np.stack([g.mask for g in gbuffers]).astype(np.float32),
    }


def cnn_loss(logits: np.ndarray, targets: dict, weights: dict | None = None):
    """Masked L1 on albedo/normal/roughness, L1 on normalised coordinates, BCE on the mask.

    Returns ``(total, parts, dlogits)``.
    """
    weights = weights or {k: 1.0 for k in CNN_LOSSES}
    m = targets["mask"][..., None]
    grad = np.zeros_like(logits)
    parts = {}

    s_a = nn.sigmoid(logits[..., 0:3])
    parts["albedo"], g = nn.l1_loss(s_a, targets["albedo"], m)
    grad[..., 0:3] = weights["albedo"] * g * s_a * (1 - s_a)

    n, back = normalize_with_grad(logits[..., 3:6])
    parts["normal"], g = nn.l1_loss(n.astype(logits.dtype), targets["normal"], m)
    grad[..., 3:6] = weights["normal"] * back(g)

    s_r = nn.sigmoid(logits[..., 6:7])
    rough = ROUGHNESS_MIN + R_SPAN * s_r
    parts["roughness"], g = nn.l1_loss(rough, targets["roughness"][..., None], m)
    grad[..., 6:7] = weights["roughness"] * g * R_SPAN * s_r * (1 - s_r)

    s_c = nn.sigmoid(logits[..., 7:10])
    parts["coord"], g = nn.l1_loss(s_c, targets["coord"])
    grad[..., 7:10] = weights["coord"] * g * s_c * (1 - s_c)

    parts["mask"], g = nn.bce_logit_loss(logits[..., 10], targets["mask"])
    grad[..., 10] = weights["mask"] * g

    total = sum(weights[k] * parts[k] for k in CNN_LOSSES)
    parts["total"] = total
    return total, parts, grad.astype(logits.dtype)


def train_cnn(model: DirectRenderer, dataset: PseudoDataset, cfg: CnnTrainConfig, rng: RngStream,
              optimizer: nn.Adam | None = None, start_step: int = 0, steps: int | None = None,
              callback=None):
    """Adam with cosine decay over ``cfg.steps``; runs ``steps`` updates from ``start_step``.

    Returns ``(model, trace, optimizer)``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    downsample = model.cfg.downsample
    raymaps = np.stack([build_raymap(c, downsample) for c in dataset.cameras])
    targets = cnn_targets(model, dataset.gbuffers)
    opt = optimizer or nn.Adam(model.parameters(), lr=cfg.lr0)
    trace = LossTrace(["step", "total", *CNN_LOSSES, "lr"])
    batch = min(cfg.poses_per_batch, len(dataset))
    end = cfg.steps if steps is None else min(cfg.steps, start_step + steps)
    for step in range(start_step, end):
        if batch == len(dataset):
            idx = np.arange(len(dataset))
        else:
            idx = np.sort(rng.split("batch", step).permutation(len(dataset))[:batch])
        model.zero_grad()
        logits = model.forward(raymaps[idx])
        total, parts, grad = cnn_loss(logits, {k: v[idx] for k, v in targets.items()}, cfg.weights)
        if not math.isfinite(total):
            raise TrainingDiverged(step)
        model.backward(grad)
        lr = nn.cosine_lr(step, cfg.steps, cfg.lr0)
        try:
            opt.step(lr)
        except nn.NonFiniteError as e:
            raise TrainingDiverged(step, "gradient") from e
        trace.append(step, parts, lr)
        if callback is not None:
            callback(step, parts)
    return model, trace, opt


# --------------------------------------------------------------------------
# Hash renderer
# --------------------------------------------------------------------------

@dataclass
class HashTrainConfig:
    rays_per_batch: int = 2048
    dirs_per_point: int = 16
    steps: int = 5000
    lr0: float = 2e-3
    final_lr_ratio: float = 0.1
    weight_decay: float = 1e-6
    poses_per_batch: int = 4
    weights: dict = field(default_factory=lambda: {"normal": 1.0, "albedo": 1.0, "roughness": 1.0,
                                                   "depth": 1.0, "visibility": 1.0})
    sampling: PoseSampling = field(default_factory=PoseSampling)

    def __post_init__(self):
        side = math.isqrt(self.dirs_per_point)
        if side * side != self.dirs_per_point:
            raise ValueError("dirs_per_point must be a perfect square")


HASH_LOSSES = ("normal", "albedo", "roughness", "depth", "visibility")
# normalised depth targets are kept this far inside (0, 1); an exact 1.0 for
# every visible pair drives the sigmoid into saturation and starves the
# occluded pairs of gradient
DEPTH_TARGET_MARGIN = 0.01


@dataclass
class HashBatch:
    x: np.ndarray  # (P, 3)
    normal: np.ndarray  # (P, 3)
    albedo: np.ndarray  # (P, 3)
    roughness: np.ndarray  # (P,)
    wi: np.ndarray  # (P, K, 3)
    v: np.ndarray  # (P, K) oracle visibility
    t: np.ndarray  # (P, K) oracle depth
    valid: np.ndarray  # (P, K) forward facing


def sample_surface_points(scene: SdfScene, count: int, rng: RngStream, sampling: PoseSampling,
                          poses: int = 4):
    """Primary-ray hits from random hemisphere poses: (x, n, albedo, roughness)."""
    xs, ns, als, rs = [], [], [], []
    have = 0
    round_ = 0
    while have < count:
        r = rng.split("round", round_)
        round_ += 1
        origins, dirs = [], []
        for p in range(poses):
            cam = sample_hemisphere_pose(sampling.radius, sampling.elevation, r.split("pose", p),
                                         center=scene.center, vfov=sampling.vfov)
            fwd, right, up = cam.frame()
            tan_h = math.tan(math.radians(cam.vfov) / 2.0)
            u = r.split("pix", p).uniform((count, 2)) * 2.0 - 1.0
            d = fwd + (u[:, 0:1] * tan_h) * right + (u[:, 1:2] * tan_h) * up
            dirs.append(d / np.linalg.norm(d, axis=1, keepdims=True))
            origins.append(np.broadcast_to(cam.position, d.shape))
        tr = trace_rays(scene, np.concatenate(origins), np.concatenate(dirs), 0.0,
                        sampling.radius + scene.radius)
        sel = np.flatnonzero(tr.hit)
        sel = sel[r.split("shuffle").permutation(sel.size)]
        xs.append(tr.x[sel])
        ns.append(tr.n[sel])
        als.append(tr.albedo[sel])
        rs.append(tr.roughness[sel])
        have += sel.size
        if round_ > 64 and have == 0:
            raise RuntimeError("no surface visible from the sampled poses")
    cat = lambda a: np.concatenate(a)[:count]
    return cat(xs), cat(ns), cat(als), cat(rs)


def make_hash_batch(scene: SdfScene, cfg: HashTrainConfig, rng: RngStream, near: float, far: float,
                    points: int | None = None, dirs: int | None = None) -> HashBatch:
    points = points or cfg.rays_per_batch
    dirs = dirs or cfg.dirs_per_point
    x, n, a, r = sample_surface_points(scene, points, rng.split("points"), cfg.sampling, cfg.poses_per_batch)
    wi = stratified_sphere_batch(points, dirs, rng.split("dirs"))
    valid = np.einsum("pkc,pc->pk", wi, n) > 0.0
    vs = visibility_depth(scene, x[:, None, :], wi, near, far)
    return HashBatch(x, n, a, r, wi, vs.v, vs.t, valid)


def hash_loss_and_grad(renderer: HashRenderer, batch: HashBatch, weights: dict | None = None,
                       backward: bool = True):
    """Forward, losses and (optionally) backward through decoder, tracer and tables."""
    weights = weights or {k: 1.0 for k in HASH_LOSSES}
    cfg = renderer.cfg
    p, k = batch.wi.shape[:2]
    f = renderer.encoder.forward(batch.x)
    raw = renderer.brdf.forward(f)
    parts = {}
    g_raw = np.zeros_like(raw)

    n, back = normalize_with_grad(raw[:, 0:3])
    parts["normal"], g = nn.l1_loss(n, batch.normal.astype(raw.dtype))
    g_raw[:, 0:3] = weights["normal"] * back(g)
    s_a = nn.sigmoid(raw[:, 3:6])
    parts["albedo"], g = nn.l1_loss(s_a, batch.albedo.astype(raw.dtype))
    g_raw[:, 3:6] = weights["albedo"] * g * s_a * (1 - s_a)
    s_r = nn.sigmoid(raw[:, 6])
    parts["roughness"], g = nn.l1_loss(ROUGHNESS_MIN + R_SPAN * s_r, batch.roughness.astype(raw.dtype))
    g_raw[:, 6] = weights["roughness"] * g * R_SPAN * s_r * (1 - s_r)

    fin = np.concatenate([np.repeat(f, k, axis=0), batch.wi.reshape(-1, 3).astype(f.dtype)], axis=1)
    out = renderer.tracer.forward(fin)
    valid = batch.valid.reshape(-1).astype(out.dtype)
    g_out = np.zeros_like(out)
    parts["visibility"], g = nn.bce_logit_loss(out[:, 0], batch.v.reshape(-1).astype(out.dtype), valid)
    g_out[:, 0] = weights["visibility"] * g
    s_t = nn.sigmoid(out[:, 1])
    t_norm = np.clip((batch.t - cfg.near) / (cfg.far - cfg.near), DEPTH_TARGET_MARGIN, 1.0 - DEPTH_TARGET_MARGIN)
    t_norm = t_norm.reshape(-1).astype(out.dtype)
    # occluded and visible pairs are averaged separately; occluded pairs are rare and
    # would otherwise be pulled to the far plane
    occ = valid * (1.0 - batch.v.reshape(-1)).astype(out.dtype)
    l_v, g = nn.l1_loss(s_t, t_norm, valid - occ)
    if occ.any():
        l_o, g_o = nn.l1_loss(s_t, t_norm, occ)
        l_v, g = l_v + l_o, g + g_o
    parts["depth"] = l_v
    g_out[:, 1] = weights["depth"] * g * s_t * (1 - s_t)

    total = sum(weights[key] * parts[key] for key in HASH_LOSSES)
    parts["total"] = total
    if backward:
        g_in = renderer.tracer.backward(g_out)
        g_f = renderer.brdf.backward(g_raw) + g_in[:, :f.shape[1]].reshape(p, k, -1).sum(axis=1)
        renderer.encoder.backward(g_f)
    return total, parts


def train_hash(renderer: HashRenderer, scene: SdfScene, cfg: HashTrainConfig, rng: RngStream,
               optimizer: nn.Adam | None = None, start_step: int = 0, steps: int | None = None,
               callback=None):
    """Online distillation against the sphere-trace oracle with exponential lr decay.

    Returns ``(renderer, trace, optimizer)``.
    """
    opt = optimizer or nn.Adam(renderer.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
    trace = LossTrace(["step", "total", *HASH_LOSSES, "lr"])
    end = cfg.steps if steps is None else min(cfg.steps, start_step + steps)
    for step in range(start_step, end):
        batch = make_hash_batch(scene, cfg, rng.split("step", step), renderer.cfg.near, renderer.cfg.far)
        renderer.zero_grad()
        total, parts = hash_loss_and_grad(renderer, batch, cfg.weights)
        if not math.isfinite(total):
            raise TrainingDiverged(step)
        lr = nn.exp_decay_lr(step, cfg.steps, cfg.lr0, cfg.final_lr_ratio)
        try:
            opt.step(lr)
        except nn.NonFiniteError as e:
            raise TrainingDiverged(step, "gradient") from e
        trace.append(step, parts, lr)
        if callback is not None:
            callback(step, parts)
    return renderer, trace, opt


def evaluate_visibility(renderer: HashRenderer, scene: SdfScene, rng: RngStream, pairs: int = 10000,
                        dirs: int = 16, sampling: PoseSampling | None = None) -> dict:
    """Held-out accuracy of hard visibility and occluded-pair depth error against the oracle."""
    cfg = HashTrainConfig(rays_per_batch=pairs // dirs, dirs_per_point=dirs, sampling=sampling or PoseSampling())
    b = make_hash_batch(scene, cfg, rng, renderer.cfg.near, renderer.cfg.far)
    f = renderer.encode(b.x)
    v, t = renderer.trace_implicit(f, b.wi)
    valid = b.valid
    pred = v > 0.5
    truth = b.v > 0.5
    occ = valid & ~truth
    return {
        "pairs": int(valid.sum()),
        "accuracy": float(np.mean(pred[valid] == truth[valid])),
        "occluded_pairs": int(occ.sum()),
        "depth_mae_occluded": float(np.mean(np.abs(t[occ] - b.t[occ]))) if occ.any() else 0.0,
        "visible_depth_gap": (float(np.mean(np.abs(t[valid & truth] - renderer.cfg.far)))
                              if (valid & truth).any() else 0.0),
    }


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_model(path, kind: str, model, optimizer: nn.Adam | None, step: int, extra: dict | None = None) -> None:
    """Weights, optimizer moments and enough metadata to rebuild ``model``."""
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state([n for n, _ in model.named_parameters()]))
    meta = {"kind": kind, "config": model.cfg.to_dict(), "aabb_min": model_aabb(model)[0].tolist(),
            "aabb_max": model_aabb(model)[1].tolist(), "step": int(step)}
    meta.update(extra or {})
    nn.save_checkpoint(path, tensors, meta)


def model_aabb(model):
    if isinstance(model, HashRenderer):
        return model.encoder.aabb_min, model.encoder.aabb_max
    return model.aabb_min, model.aabb_max


def load_model(path, expect: str | None = None):
    """Returns ``(model, tensors, meta)``; ``tensors`` still holds the optimizer state."""
    from .cnn import CnnConfig
    from .hashgrid import HashConfig

    tensors, meta = nn.load_checkpoint(path)
    kind = meta.get("kind")
    if expect is not None and kind != expect:
        raise ValueError(f"{path}: checkpoint holds a {kind!r} model, expected {expect!r}")
    rng = RngStream(0)
    if kind == "cnn":
        model = DirectRenderer(CnnConfig.from_dict(meta["config"]), meta["aabb_min"], meta["aabb_max"], rng)
    elif kind == "hash":
        model = HashRenderer(HashConfig.from_dict(meta["config"]), meta["aabb_min"], meta["aabb_max"], rng)
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    return model, tensors, meta


def restore_optimizer(model, tensors: dict, optimizer: nn.Adam) -> None:
    optimizer.load_state([n for n, _ in model.named_parameters()], tensors)
