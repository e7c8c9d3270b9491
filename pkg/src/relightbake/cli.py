"""``relightbake`` command line: pseudo data, training, rendering, evaluation, benchmarks.

Every numeric knob can come from a ``key = value`` config file given with
``--config``; command-line flags override it. Exit codes: 0 ok, 2 bad
configuration or inputs, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import nn
from .cnn import CnnConfig, DirectRenderer
from .distill import (CnnTrainConfig, HashTrainConfig, PoseSampling, PseudoDataset, TrainingDiverged,
                      build_pseudo_dataset, default_train_poses, load_model, restore_optimizer, save_model,
                      train_cnn, train_hash)
from .envlight import load_env
from .geom import RngStream
from .hashgrid import HashConfig, HashRenderer
from .pfm import read_pfm, write_pfm
from .scene import Camera, load_scene, sample_hemisphere_pose

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# Config plumbing
# --------------------------------------------------------------------------

def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Values stay strings."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            if k not in defaults:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = _coerce(v, defaults[k], k)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _coerce(v: str, like, key: str):
    try:
        if isinstance(like, bool):
            if v.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(v)
            return v.lower() in ("1", "true", "yes")
        if isinstance(like, int):
            return int(v)
        if isinstance(like, float):
            return float(v)
        if isinstance(like, list):
            return [int(x) for x in v.replace(",", " ").split()]
    except ValueError as e:
        raise ConfigError(f"bad value {v!r} for {key}") from e
    return v


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                           capture_output=True, text=True, timeout=5)
        return r.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> dict:
    manifest = {"command": command, "config": cfg, "config_hash": config_hash(cfg), "seed": cfg.get("seed"),
                "git": git_describe()}
    manifest.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


def _scene(name: str):
    try:
        return load_scene(name)
    except FileNotFoundError as e:
        raise ConfigError(f"scene not found: {name}") from e


def _env(spec: str):
    try:
        return load_env(spec)
    except FileNotFoundError as e:
        raise ConfigError(f"environment map not found: {spec}") from e
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _sampling(cfg: dict) -> PoseSampling:
    r = cfg["resolution"]
    return PoseSampling(radius=cfg["radius"], elevation=(cfg["elev_min"], cfg["elev_max"]),
                        min_angle=cfg["min_angle"], vfov=cfg["vfov"], resolution=(r, r))


POSE_DEFAULTS = {"radius": 3.5, "elev_min": 5.0, "elev_max": 75.0, "min_angle": 1.0, "vfov": 40.0,
                 "resolution": 128}


def _test_poses(scene, count: int, seed: int, sampling: PoseSampling) -> list[Camera]:
    rng = RngStream(seed).split("test-poses")
    return [sample_hemisphere_pose(sampling.radius, sampling.elevation, rng, center=scene.center,
                                   vfov=sampling.vfov, resolution=sampling.resolution) for _ in range(count)]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

PSEUDO_DEFAULTS = {"scene": "spheres", "n_random": 512, "train_poses": 8, "test_poses": 8, "seed": 0,
                   **POSE_DEFAULTS}


def cmd_pseudo(args) -> int:
    cfg = resolve(args, PSEUDO_DEFAULTS)
    scene = _scene(cfg["scene"])
    sampling = _sampling(cfg)
    train = default_train_poses(scene, cfg["train_poses"], cfg["seed"], sampling)
    test = _test_poses(scene, cfg["test_poses"], cfg["seed"], sampling)
    ds = build_pseudo_dataset(scene, cfg["n_random"], train, test, RngStream(cfg["seed"]).split("random-poses"),
                              sampling)
    out = Path(args.out)
    ds.save(out)
    write_manifest(out, "pseudo", cfg, {"manifest_hash": ds.manifest_hash(), "poses": len(ds)})
    print(f"{len(ds)} poses -> {out} (manifest {ds.manifest_hash()[:12]})")
    return EXIT_OK


TRAIN_CNN_DEFAULTS = {"data": "", "profile": "desk", "steps": 3000, "batch": 64, "lr": 5e-4, "seed": 0,
                      "stem_channels": 0, "trunk_depth": 0, "sr_channels": [], "upsampler": "bilinear"}


def _cnn_config(cfg: dict) -> CnnConfig:
    c = CnnConfig.desk() if cfg["profile"] == "desk" else CnnConfig()
    if cfg["profile"] not in ("desk", "full"):
        raise ConfigError(f"unknown profile {cfg['profile']!r}")
    if cfg["stem_channels"]:
        c.stem_channels = cfg["stem_channels"]
    if cfg["trunk_depth"]:
        c.trunk_depth = cfg["trunk_depth"]
    if cfg["sr_channels"]:
        c.sr_channels = list(cfg["sr_channels"])
    c.upsampler = cfg["upsampler"]
    return c


def cmd_train_cnn(args) -> int:
    cfg = resolve(args, TRAIN_CNN_DEFAULTS)
    if not cfg["data"]:
        raise ConfigError("--data is required")
    try:
        ds = PseudoDataset.load(cfg["data"])
    except FileNotFoundError as e:
        raise ConfigError(f"dataset not found: {e.filename}") from e
    scene = _scene(ds.manifest["scene"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = 0
    if args.resume:
        model, tensors, meta = load_model(args.resume, "cnn")
        opt = nn.Adam(model.parameters(), lr=cfg["lr"])
        restore_optimizer(model, tensors, opt)
        start = meta["step"]
    else:
        model = DirectRenderer(_cnn_config(cfg), scene.aabb_min, scene.aabb_max, RngStream(cfg["seed"]).split("cnn"))
        opt = None
    tcfg = CnnTrainConfig(poses_per_batch=cfg["batch"], steps=cfg["steps"], lr0=cfg["lr"])
    _, trace, opt = train_cnn(model, ds, tcfg, RngStream(cfg["seed"]).split("cnn-train"), opt, start_step=start)
    save_model(out / "cnn.rbck", "cnn", model, opt, tcfg.steps, {"seed": cfg["seed"]})
    trace.to_csv(out / "loss.csv", append=bool(args.resume))
    write_manifest(out, "train-cnn", cfg, {"dataset_manifest_hash": ds.manifest_hash(), "start_step": start,
                                           "steps": tcfg.steps})
    print(f"trained {tcfg.steps - start} steps -> {out / 'cnn.rbck'}")
    return EXIT_OK


TRAIN_HASH_DEFAULTS = {"scene": "occluder-pair", "profile": "desk", "steps": 5000, "rays": 2048, "dirs": 16,
                       "lr": 2e-3, "weight_decay": 1e-6, "seed": 0, **POSE_DEFAULTS}


def cmd_train_hash(args) -> int:
    cfg = resolve(args, TRAIN_HASH_DEFAULTS)
    scene = _scene(cfg["scene"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = 0
    opt = None
    if args.resume:
        model, tensors, meta = load_model(args.resume, "hash")
        opt = nn.Adam(model.parameters(), lr=cfg["lr"], weight_decay=cfg["weight_decay"])
        restore_optimizer(model, tensors, opt)
        start = meta["step"]
    else:
        if cfg["profile"] not in ("desk", "full"):
            raise ConfigError(f"unknown profile {cfg['profile']!r}")
        hc = HashConfig.desk() if cfg["profile"] == "desk" else HashConfig()
        model = HashRenderer(hc, scene.aabb_min, scene.aabb_max, RngStream(cfg["seed"]).split("hash"))
    try:
        tcfg = HashTrainConfig(rays_per_batch=cfg["rays"], dirs_per_point=cfg["dirs"], steps=cfg["steps"],
                               lr0=cfg["lr"], weight_decay=cfg["weight_decay"], sampling=_sampling(cfg))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    _, trace, opt = train_hash(model, scene, tcfg, RngStream(cfg["seed"]).split("hash-train"), opt, start_step=start)
    save_model(out / "hash.rbck", "hash", model, opt, tcfg.steps, {"seed": cfg["seed"], "scene": scene.name})
    trace.to_csv(out / "loss.csv", append=bool(args.resume))
    write_manifest(out, "train-hash", cfg, {"start_step": start, "steps": tcfg.steps})
    print(f"trained {tcfg.steps - start} steps -> {out / 'hash.rbck'}")
    return EXIT_OK


RENDER_DEFAULTS = {"scene": "spheres", "env": "builtin:sky", "spp": 16, "bounces": 2, "provider": "teacher",
                   "cnn": "", "hash": "", "seed": 0, "pose_seed": 0, "threads": os.cpu_count() or 1,
                   "no_denoise": False, "calibrate_albedo": False, **POSE_DEFAULTS}


def build_providers(cfg: dict, scene):
    from .integrator import BakedSurface, BakedVisibility, TeacherSurface, TeacherVisibility

    if cfg["provider"] == "teacher":
        return TeacherSurface(scene), TeacherVisibility(scene)
    if cfg["provider"] != "baked":
        raise ConfigError(f"unknown provider {cfg['provider']!r}")
    if not cfg["cnn"] or not cfg["hash"]:
        raise ConfigError("the baked provider needs --cnn and --hash checkpoints")
    for p in (cfg["cnn"], cfg["hash"]):
        if not Path(p).exists():
            raise ConfigError(f"checkpoint not found: {p}")
    cnn, _, _ = load_model(cfg["cnn"], "cnn")
    hsh, _, _ = load_model(cfg["hash"], "hash")
    return BakedSurface(cnn), BakedVisibility(hsh)


def render_camera(cfg: dict, scene) -> Camera:
    s = _sampling(cfg)
    return sample_hemisphere_pose(s.radius, s.elevation, RngStream(cfg["pose_seed"]).split("render-pose"),
                                  center=scene.center, vfov=s.vfov, resolution=s.resolution)


def cmd_render(args) -> int:
    from .integrator import ShadeConfig, albedo_rescale, shade_frame
    from .metrics import tonemap
    from .scene import trace_gbuffer
    from .svgf import AuxBuffers, denoise

    cfg = resolve(args, RENDER_DEFAULTS)
    scene = _scene(cfg["scene"])
    env = _env(cfg["env"])
    try:
        shade = ShadeConfig(env, spp=cfg["spp"], bounces=cfg["bounces"], threads=cfg["threads"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    surface, vis = build_providers(cfg, scene)
    camera = render_camera(cfg, scene)
    scale = None
    if cfg["calibrate_albedo"]:
        pred = surface.surface(camera)
        ref = trace_gbuffer(scene, camera)
        scale, _ = albedo_rescale(pred.albedo, ref.albedo, ref.mask * (pred.mask > 0.5))
    frame = shade_frame(surface, vis, shade, camera, cfg["seed"], albedo_scale=scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image = frame.radiance
    write_pfm(out / "raw.pfm", image)
    if not cfg["no_denoise"]:
        image = denoise(image, AuxBuffers.from_frame(frame.aux))
    if not np.all(np.isfinite(image)):
        raise FloatingPointError("non-finite pixels in the rendered frame")
    write_pfm(out / "radiance.pfm", image)
    from PIL import Image

    Image.fromarray(tonemap(image)).save(out / "radiance.png")
    aux_dir = out / "aux"
    aux_dir.mkdir(exist_ok=True)
    for k, v in frame.aux.items():
        if v.ndim == 3 and v.shape[2] == 2:
            # PFM holds 1 or 3 channels; the two gradient components go in R and G
            v = np.concatenate([v, np.zeros(v.shape[:2] + (1,))], axis=-1)
        write_pfm(aux_dir / f"{k}.pfm", v)
    write_manifest(out, "render", cfg, {"camera": camera.to_dict(), "timings_s": frame.timings,
                                        "diagnostics": frame.diagnostics,
                                        "albedo_scale": None if scale is None else list(map(float, scale)),
                                        "aux": sorted(frame.aux)})
    print(f"rendered {image.shape[1]}x{image.shape[0]} -> {out}")
    return EXIT_OK


def _read_image(path) -> np.ndarray:
    try:
        return read_pfm(path).astype(np.float64)
    except FileNotFoundError as e:
        raise ConfigError(f"image not found: {path}") from e


def cmd_eval(args) -> int:
    from .integrator import albedo_rescale
    from .metrics import psnr, ssim

    a = _read_image(args.a)
    b = _read_image(args.b)
    if a.shape != b.shape:
        raise ConfigError(f"image sizes differ: {a.shape} vs {b.shape}")
    mask = _read_image(args.mask) if args.mask else np.ones(a.shape[:2])
    result = {"a": str(args.a), "b": str(args.b)}
    if args.calibrate_albedo:
        scale, a = albedo_rescale(a, b, mask)
        result["albedo_scale"] = [float(s) for s in scale]
    if args.mask:
        m = mask[..., None] if a.ndim == 3 else mask
        a, b = a * m, b * m
    result["psnr"] = psnr(a, b)
    result["ssim"] = ssim(a, b) if min(a.shape[:2]) >= 11 else None
    result["lpips"] = "n/a"
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


BENCH_DEFAULTS = {**RENDER_DEFAULTS, "spp_list": [4, 8, 16, 32], "repeats": 5, "bounces": 1}


def cmd_bench(args) -> int:
    from .integrator import ShadeConfig
    from .metrics import bench_render, write_latency_csv

    cfg = resolve(args, BENCH_DEFAULTS)
    scene = _scene(cfg["scene"])
    env = _env(cfg["env"])
    camera = render_camera(cfg, scene)
    providers = [("teacher", build_providers({**cfg, "provider": "teacher"}, scene))]
    if cfg["provider"] == "baked":
        providers.append(("baked", build_providers(cfg, scene)))
    rows, labels = [], []
    for spp in cfg["spp_list"]:
        base = None
        for label, (surface, vis) in providers:
            shade = ShadeConfig(env, spp=spp, bounces=cfg["bounces"], threads=cfg["threads"])
            r = bench_render(surface, vis, shade, camera, repeats=cfg["repeats"], denoise=not cfg["no_denoise"],
                             seed=cfg["seed"], baseline_ms=base)
            if base is None:
                base = r.total_ms
                r.speedup = 1.0
            rows.append(r)
            labels.append(f"{label}@{spp}")
            print(f"{label:8s} spp={spp:3d} model={r.model_op_ms:8.1f} vis={r.vis_ms:8.1f} "
                  f"render={r.render_ms:8.1f} dnsr={r.dnsr_ms:6.1f} total={r.total_ms:8.1f} ms")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_latency_csv(out / "latency.csv", rows, labels, config_hash(cfg))
    write_manifest(out, "bench", cfg)
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key = value file; flags override")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required)


def _pose_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--radius", type=float)
    p.add_argument("--elev-min", dest="elev_min", type=float)
    p.add_argument("--elev-max", dest="elev_max", type=float)
    p.add_argument("--min-angle", dest="min_angle", type=float)
    p.add_argument("--vfov", type=float)
    p.add_argument("--resolution", type=int)


def _render_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene")
    p.add_argument("--env")
    p.add_argument("--spp", type=int)
    p.add_argument("--bounces", type=int, choices=(1, 2))
    p.add_argument("--provider", choices=("teacher", "baked"))
    p.add_argument("--cnn")
    p.add_argument("--hash")
    p.add_argument("--pose-seed", dest="pose_seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--no-denoise", dest="no_denoise", action="store_const", const=True)
    _pose_flags(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relightbake", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pseudo", help="teacher G-buffers for training and random poses")
    _common(p)
    p.add_argument("--scene")
    p.add_argument("--n-random", dest="n_random", type=int)
    p.add_argument("--train-poses", dest="train_poses", type=int)
    p.add_argument("--test-poses", dest="test_poses", type=int)
    _pose_flags(p)
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("train-cnn", help="distil the G-buffer CNN")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--profile", choices=("desk", "full"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--upsampler", choices=("bilinear", "transposed"))
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_cnn)

    p = sub.add_parser("train-hash", help="distil the hash-grid renderer")
    _common(p)
    p.add_argument("--scene")
    p.add_argument("--profile", choices=("desk", "full"))
    p.add_argument("--steps", type=int)
    p.add_argument("--rays", type=int)
    p.add_argument("--dirs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--resume")
    _pose_flags(p)
    p.set_defaults(func=cmd_train_hash)

    p = sub.add_parser("render", help="shade one frame")
    _common(p)
    _render_flags(p)
    p.add_argument("--calibrate-albedo", dest="calibrate_albedo", action="store_const", const=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR / SSIM between two PFM images")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--mask")
    p.add_argument("--calibrate-albedo", dest="calibrate_albedo", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-stage latency table")
    _common(p)
    _render_flags(p)
    p.add_argument("--spp-list", dest="spp_list", type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
