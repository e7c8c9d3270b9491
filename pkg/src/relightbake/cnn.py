"""Direct-illumination G-buffer renderer: downsampled ray map in, full-resolution maps out.

Stem and trunk are 1x1 conv-norm-act layers (the trunk residual). Each
super-resolution block upsamples x2 bilinearly and applies two 3x3
conv-norm-act layers; every block has an 11-channel head and head outputs are
chained through bilinear output skips, so the final logits are
``up(up(head1) + head2) + head3``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .brdf import ROUGHNESS_MAX, ROUGHNESS_MIN
from .geom import RngStream
from .nn import (Conv2d, GELU, InstanceNorm, Linear, Module, Residual, Sequential, Upsample2x, ZeroInsert2x,
                 conv_norm_act, sigmoid)
from .scene import Camera, GBuffer

HEAD_CHANNELS = 11
# head channel layout
ALBEDO, NORMAL, ROUGH, COORD, MASK = slice(0, 3), slice(3, 6), slice(6, 7), slice(7, 10), slice(10, 11)


@dataclass
class CnnConfig:
    stem_channels: int = 256
    trunk_depth: int = 28
    sr_channels: list[int] = field(default_factory=lambda: [128, 64, 32])
    downsample: int = 8
    posenc_freqs: int = 0
    upsampler: str = "bilinear"  # "transposed" only for the artifact fixture

    @classmethod
    def desk(cls) -> "CnnConfig":
        return cls(stem_channels=64, trunk_depth=4, sr_channels=[48, 32, 16])

    @classmethod
    def from_dict(cls, d: dict) -> "CnnConfig":
        return cls(**{k: d[k] for k in asdict(cls()) if k in d})

    def to_dict(self) -> dict:
        return asdict(self)

    def halved(self) -> "CnnConfig":
        return CnnConfig(self.stem_channels // 2, self.trunk_depth, [c // 2 for c in self.sr_channels],
                         self.downsample, self.posenc_freqs, self.upsampler)


def build_raymap(camera: Camera, downsample: int = 8) -> np.ndarray:
    """(6, h, w) ray map: camera origin broadcast, then unit directions through downsampled pixel centers."""
    w, h = camera.resolution
    if w % downsample or h % downsample:
        raise ValueError(f"resolution {w}x{h} is not divisible by {downsample}")
    origins, dirs = camera.rays((w // downsample, h // downsample))
    return np.concatenate([origins, dirs], axis=-1).transpose(2, 0, 1).copy()


def positional_encoding(x: np.ndarray, freqs: int) -> np.ndarray:
    if freqs == 0:
        return x
    bands = [x]
    for k in range(freqs):
        bands += [np.sin((2.0 ** k) * np.pi * x), np.cos((2.0 ** k) * np.pi * x)]
    return np.concatenate(bands, axis=-1)


class DirectRenderer(Module):
    def __init__(self, cfg: CnnConfig, aabb_min, aabb_max, rng: RngStream, zero_heads: bool = True):
        self.cfg = cfg
        self.aabb_min = np.asarray(aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(aabb_max, dtype=np.float64)
        cin = 6 * (1 + 2 * cfg.posenc_freqs)
        c0 = cfg.stem_channels
        self.stem = conv_norm_act(cin, c0, 1, rng.split("stem"))
        self.trunk = [Residual(conv_norm_act(c0, c0, 1, rng.split("trunk", i))) for i in range(cfg.trunk_depth)]
        self.blocks = []
        self.heads = []
        prev = c0
        for k, c in enumerate(cfg.sr_channels):
            brng = rng.split("block", k)
            if cfg.upsampler == "bilinear":
                up = [Upsample2x()]
            elif cfg.upsampler == "transposed":
                up = [ZeroInsert2x(), Conv2d(prev, prev, 3, brng.split("tconv"))]
            else:
                raise ValueError(f"unknown upsampler {cfg.upsampler!r}")
            self.blocks.append(Sequential(*up, conv_norm_act(prev, c, 3, brng.split("a")),
                                          conv_norm_act(c, c, 3, brng.split("b"))))
            self.heads.append(Conv2d(c, HEAD_CHANNELS, 1, rng.split("head", k), zero_init=zero_heads))
            prev = c
        self._skip = Upsample2x()

    def _prepare(self, raymap) -> np.ndarray:
        rm = np.asarray(raymap)
        if rm.ndim == 3:
            rm = rm[None]
        if rm.ndim != 4 or rm.shape[1] != 6:
            raise ValueError(f"ray map shape {np.shape(raymap)} does not match expected (N, 6, h, w)")
        x = rm.transpose(0, 2, 3, 1)
        return positional_encoding(x, self.cfg.posenc_freqs).astype(self.stem.layers[0].weight.value.dtype)

    def forward(self, raymap) -> np.ndarray:
        """Head logits (N, 8h, 8w, 11) for ray maps (N, 6, h, w) or (6, h, w)."""
        x = self.stem.forward(self._prepare(raymap))
        for layer in self.trunk:
            x = layer.forward(x)
        out = None
        for block, head in zip(self.blocks, self.heads):
            x = block.forward(x)
            o = head.forward(x)
            out = o if out is None else self._skip.forward(out) + o
        return out

    def backward(self, g) -> np.ndarray:
        g_feat = None
        for k in reversed(range(len(self.blocks))):
            gh = self.heads[k].backward(g)
            g_feat = self.blocks[k].backward(gh if g_feat is None else gh + g_feat)
            if k > 0:
                g = self._skip.backward(g)
        for layer in reversed(self.trunk):
            g_feat = layer.backward(g_feat)
        return self.stem.backward(g_feat)

    def map_outputs(self, logits: np.ndarray) -> dict:
        raw_n = logits[..., NORMAL]
        length = np.linalg.norm(raw_n, axis=-1, keepdims=True)
        normal = np.where(length > 0, raw_n / np.where(length > 0, length, 1.0), 0.0)
        extent = self.aabb_max - self.aabb_min
        return {
            "albedo": sigmoid(logits[..., ALBEDO]),
            "normal": normal,
            "roughness": ROUGHNESS_MIN + (ROUGHNESS_MAX - ROUGHNESS_MIN) * sigmoid(logits[..., 6]),
            "coord": self.aabb_min + sigmoid(logits[..., COORD].astype(np.float64)) * extent,
            "mask": sigmoid(logits[..., 10]),
        }


def forward_gbuffer(model: DirectRenderer, raymap, origin=None) -> GBuffer:
    """One forward pass to a G-buffer.

    Depth is the distance from ``origin`` (default: ray-map origin) to the coordinate.
    """
    rm = np.asarray(raymap)
    logits = model.forward(rm)[0]
    maps = model.map_outputs(logits.astype(np.float64))
    o = rm[0:3, 0, 0] if origin is None else np.asarray(origin)
    depth = np.linalg.norm(maps["coord"] - o, axis=-1)
    mask = maps["mask"]
    fg = mask > 0.5
    return GBuffer(albedo=maps["albedo"], roughness=maps["roughness"],
                   normal=np.where(fg[..., None], maps["normal"], 0.0), coord=maps["coord"], mask=mask,
                   depth=depth)


def count_forward_cost(model: Module, input_hw: tuple[int, int] | None = None) -> dict:
    """Static multiply-accumulate and parameter counts.

    For a ``DirectRenderer`` the input size defaults to the 16x16 desk ray map.
    Norms and activations are not counted as MACs.
    """
    if isinstance(model, DirectRenderer):
        h, w = input_hw or (16, 16)
        macs, (h, w) = _walk([model.stem, *model.trunk], h, w)
        for block, head in zip(model.blocks, model.heads):
            m, (h, w) = _walk([block], h, w)
            mh, _ = _walk([head], h, w)
            macs += m + mh
    else:
        if input_hw is None:
            raise ValueError("input size required for a bare module")
        macs, _ = _walk([model], *input_hw)
    return {"macs": int(macs), "params": model.num_parameters()}


def _walk(modules, h, w):
    total = 0
    for m in modules:
        if isinstance(m, Conv2d):
            total += m.macs(h, w)
        elif isinstance(m, Linear):
            total += m.cin * m.cout * h * w
        elif isinstance(m, (Upsample2x, ZeroInsert2x)):
            h, w = 2 * h, 2 * w
        elif isinstance(m, Sequential):
            t, (h, w) = _walk(m.layers, h, w)
            total += t
        elif isinstance(m, Residual):
            t, (h, w) = _walk([m.body], h, w)
            total += t
        elif isinstance(m, (InstanceNorm, GELU)):
            pass
        else:
            raise TypeError(f"cannot count cost of {type(m).__name__}")
    return total, (h, w)


def checkerboard_ratio(img: np.ndarray, crop: int = 4) -> float:
    """Largest Nyquist-to-neighbour DFT magnitude ratio of the local-mean residual.

    ``img`` is (H, W) or (H, W, C). The residual ``img - box3(img)`` is
    cropped by ``crop`` pixels, then for every channel the magnitudes at the
    three period-2 frequencies are compared with the largest magnitude among
    their +-1 neighbours. A value above 2 flags a checkerboard.
    """
    from scipy.ndimage import uniform_filter

    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    worst = 0.0
    for c in range(a.shape[-1]):
        ch = a[..., c]
        d = (ch - uniform_filter(ch, size=3, mode="nearest"))[crop:-crop, crop:-crop]
        if d.shape[0] % 2:
            d = d[:-1]
        if d.shape[1] % 2:
            d = d[:, :-1]
        mag = np.abs(np.fft.fft2(d))
        h, w = mag.shape
        for fy, fx in ((h // 2, 0), (0, w // 2), (h // 2, w // 2)):
            peak = mag[fy, fx]
            neigh = max(mag[(fy + dy) % h, (fx + dx) % w] for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                        if (dy, dx) != (0, 0))
            if peak == 0.0:
                continue
            worst = max(worst, peak / max(neigh, 1e-300))
    return float(worst)
