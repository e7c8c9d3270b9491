"""Wall time of each hot kernel on the numpy fallback vs the compiled backend.

    python benchmarks/bench_kernels.py [--repeats 5] [--csv out.csv]
"""
import argparse
import csv
import statistics
import time

import numpy as np

from relightbake import kernels
from relightbake.hashgrid import HashConfig, level_resolutions
from relightbake.scene import load_scene


def timed(fn, repeats):
    fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def cases():
    g = np.random.default_rng(0)
    scene = load_scene("cornell-sdf")
    pts = g.uniform(-1, 1, (100_000, 3))
    origins = np.tile([0.0, 0.0, 2.5], (20_000, 1))
    dirs = g.normal(size=(20_000, 3)) * 0.3 + [0, 0, -1]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    cfg = HashConfig.desk()
    tables = (g.random((cfg.levels, 1 << cfg.table_log2, cfg.feature_dim)).astype(np.float32) - 0.5) * 1e-2
    res = level_resolutions(cfg.levels, cfg.n_min, cfg.n_max)
    dense = ((res + 1) ** 3 <= tables.shape[1]).astype(np.uint8)
    xn = g.random((32_768, 3))

    h, w = 128, 128
    color = g.random((h, w, 3))
    var = g.random((h, w)) * 0.01
    lum = color @ [0.2126, 0.7152, 0.0722]
    depth = 2 + g.random((h, w)) * 0.1
    nrm = np.zeros((h, w, 3))
    nrm[..., 2] = 1
    dgrad = np.zeros((h, w, 2)) + 0.01
    mask = np.ones((h, w))

    hid = 64
    prefix = g.normal(size=(2048, hid)).astype(np.float32)
    wi = g.normal(size=(2048, 32, 3)).astype(np.float32)
    w1d = g.normal(size=(3, hid)).astype(np.float32) * 0.3
    w2 = g.normal(size=(hid, hid)).astype(np.float32) * 0.1
    b2 = np.zeros(hid, np.float32)
    w3 = g.normal(size=(hid, 2)).astype(np.float32) * 0.1
    b3 = np.zeros(2, np.float32)
    x_act = g.normal(size=(4_000_000,)).astype(np.float32)
    x_conv = g.normal(size=(8, 64, 64, 32)).astype(np.float32)
    w_conv = g.normal(size=(9 * 32, 32)).astype(np.float32) * 0.05
    b_conv = np.zeros(32, np.float32)

    def encode(k):
        return lambda: k.hash_encode(xn, tables, res, dense)

    feats, idx, wts = kernels.backend("python").hash_encode(xn, tables, res, dense)
    gfeat = np.ones_like(feats)
    return [
        ("scene_sdf 100k", False, lambda k: k.scene_sdf(scene.kinds, scene.params, pts)),
        ("sphere_trace 20k", False,
         lambda k: k.sphere_trace(scene.kinds, scene.params, origins, dirs, 0.0, 10.0, 1e-4, 128)),
        ("hash_encode 32k", False, lambda k: encode(k)()),
        ("hash_scatter 32k", False, lambda k: k.hash_scatter(gfeat, idx, wts, tables.shape)),
        ("atrous_pass 128^2", False,
         lambda k: k.atrous_pass(color, var, lum, depth, nrm, dgrad, mask, 2, 1.0, 128.0, 4.0, 1e-8)),
        ("gelu 4M", True, lambda k: k.gelu_cdf(x_act)),
        ("tracer_infer 64k", True, lambda k: k.tracer_infer(prefix, wi, w1d, w2, b2, w3, b3)),
        ("conv3x3 8x64x64x32", True, lambda k: k.conv3x3_forward(x_conv, w_conv, b_conv)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args()
    py = kernels.backend("python")
    try:
        cy, cyf = kernels.backend("cython"), kernels.backend("cython", fast=True)
    except ImportError:
        cy = cyf = None
        print("compiled backend not built; timing the numpy fallback only")
    rows = []
    print(f"{'kernel':22s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fast, fn in cases():
        tp = timed(lambda: fn(py), args.repeats)
        tc = timed(lambda: fn(cyf if fast else cy), args.repeats) if cy is not None else float("nan")
        rows.append((name, 1e3 * tp, 1e3 * tc, tp / tc))
        print(f"{name:22s} {1e3 * tp:10.2f} {1e3 * tc:10.2f} {tp / tc:8.1f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kernel", "python_ms", "cython_ms", "speedup"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
