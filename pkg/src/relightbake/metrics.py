"""Image metrics, tone mapping and the per-stage latency benchmark."""
from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0
REC709 = np.array([0.2126, 0.7152, 0.0722])


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ REC709 if img.ndim == 3 else img


def ssim(a, b, data_range: float = 1.0, sigma: float = 1.5, window: int = 11) -> float:
    """Mean SSIM of Rec.709 luma with a truncated Gaussian window."""
    x, y = _gray(a), _gray(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    trunc = (window // 2) / sigma

    def blur(z):
        return gaussian_filter(z, sigma, truncate=trunc, mode="reflect")

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    # drop the border where the window leaves the image
    r = window // 2
    return float(np.mean(s[r:-r, r:-r]))


def srgb_encode(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def tonemap(img) -> np.ndarray:
    """Linear radiance to 8-bit sRGB."""
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("non-finite pixels")
    return np.rint(srgb_encode(img) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------
# Latency breakdown
# --------------------------------------------------------------------------

@dataclass
class LatencyBreakdown:
    model_op_ms: float
    vis_ms: float
    render_ms: float
    dnsr_ms: float
    total_ms: float
    fps: float
    speedup: float = float("nan")
    spp: int = 0
    queries: int = 0

    COLUMNS = ("model_op_ms", "vis_ms", "render_ms", "dnsr_ms", "total_ms", "fps", "speedup", "spp", "queries")

    def row(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


def bench_render(surface, vis, cfg, camera, repeats: int = 5, warmup: int = 2, denoise_cfg=None,
                 denoise: bool = True, seed: int = 0, baseline_ms: float | None = None) -> LatencyBreakdown:
    """Median per-stage wall time of ``shade_frame`` (+ denoiser) over ``repeats`` runs.

    Stages: G-buffer provider call, visibility and indirect queries, shading
    arithmetic, denoiser.
    """
    from .integrator import shade_frame
    from .svgf import AuxBuffers, SvgfConfig, denoise as run_denoise

    if warmup < 2:
        raise ValueError("at least two warm-up runs")
    denoise_cfg = denoise_cfg or SvgfConfig()
    samples = {"model": [], "vis": [], "render": [], "dnsr": []}
    queries = []
    for i in range(warmup + repeats):
        before = vis.queries
        frame = shade_frame(surface, vis, cfg, camera, seed)
        t0 = time.perf_counter()
        if denoise:
            run_denoise(frame.radiance, AuxBuffers.from_frame(frame.aux), denoise_cfg)
        dn = time.perf_counter() - t0 if denoise else 0.0
        if i < warmup:
            continue
        queries.append(vis.queries - before)
        for k in ("model", "vis", "render"):
            samples[k].append(frame.timings.get(k, 0.0))
        samples["dnsr"].append(dn)
    if len(set(queries)) > 1:
        raise RuntimeError("query counts differ between repeats")
    med = {k: 1000.0 * statistics.median(v) for k, v in samples.items()}
    total = med["model"] + med["vis"] + med["render"] + med["dnsr"]
    return LatencyBreakdown(med["model"], med["vis"], med["render"], med["dnsr"], total,
                            1000.0 / total if total > 0 else float("inf"),
                            baseline_ms / total if baseline_ms else float("nan"), cfg.spp, queries[0])


def write_latency_csv(path, rows: list[LatencyBreakdown], labels: list[str], config_hash: str = "") -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", *LatencyBreakdown.COLUMNS, "config_hash"])
        for label, r in zip(labels, rows):
            w.writerow([label, *r.row(), config_hash])


def linear_fit_r2(x, y) -> tuple[float, float, float]:
    """Least-squares line ``y = a x + b`` and its coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (a * x + b)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return float(a), float(b), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def summary(a, b) -> dict:
    return {"psnr": psnr(a, b), "ssim": ssim(a, b), "lpips": "n/a"}

