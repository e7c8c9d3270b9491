"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every signature.
Primitive encoding shared by both: ``kinds`` int32 (0 sphere, 1 box, 2 plane)
and ``params`` float64 rows of 6 values:
sphere (cx, cy, cz, r, -, -), box (cx, cy, cz, hx, hy, hz),
plane (nx, ny, nz, offset, -, -) with distance ``n.x - offset``.
"""
from __future__ import annotations

import numpy as np

SPHERE, BOX, PLANE = 0, 1, 2
PRIME_Y = 2654435761
PRIME_Z = 805459861
BSPLINE = np.array([1.0 / 16.0, 1.0 / 4.0, 3.0 / 8.0, 1.0 / 4.0, 1.0 / 16.0])


def _prim_sdf(kind: int, prm: np.ndarray, p: np.ndarray) -> np.ndarray:
    if kind == SPHERE:
        return np.sqrt(np.sum((p - prm[:3]) ** 2, axis=-1)) - prm[3]
    if kind == BOX:
        q = np.abs(p - prm[:3]) - prm[3:6]
        outside = np.sqrt(np.sum(np.maximum(q, 0.0) ** 2, axis=-1))
        return outside + np.minimum(np.max(q, axis=-1), 0.0)
    if kind == PLANE:
        return p @ prm[:3] - prm[3]
    raise ValueError(f"unknown primitive kind {kind}")


def scene_sdf(kinds, params, points):
    """Signed distance and index of the nearest primitive for (M, 3) points."""
    points = np.asarray(points, dtype=np.float64)
    best = np.full(points.shape[0], np.inf)
    idx = np.zeros(points.shape[0], dtype=np.int64)
    for i, (k, prm) in enumerate(zip(kinds, params)):
        d = _prim_sdf(int(k), prm, points)
        closer = d < best
        best = np.where(closer, d, best)
        idx = np.where(closer, i, idx)
    return best, idx


def sphere_trace(kinds, params, origins, dirs, t_min, t_max, eps, max_steps):
    """March every ray until ``sdf < eps`` or ``t > t_max``.

    ``t_min``/``t_max`` are scalars or (M,) arrays. Returns
    ``(t, hit, prim, steps)``; rays that run out of steps are misses with
    ``steps == max_steps``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    m = origins.shape[0]
    t = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (m,)).copy()
    tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (m,))
    hit = np.zeros(m, dtype=bool)
    prim = np.full(m, -1, dtype=np.int64)
    steps = np.zeros(m, dtype=np.int64)
    active = np.flatnonzero(t <= tmax)
    for _ in range(max_steps):
        if active.size == 0:
            break
        p = origins[active] + t[active, None] * dirs[active]
        d, pi = scene_sdf(kinds, params, p)
        steps[active] += 1
        done = d < eps
        hit[active[done]] = True
        prim[active[done]] = pi[done]
        go = active[~done]
        t[go] += d[~done]
        active = go[t[go] <= tmax[go]]
    return t, hit, prim, steps


# --------------------------------------------------------------------------
# Multiresolution hash grid
# --------------------------------------------------------------------------

def _corner_index(cx, cy, cz, res, dense, tsize):
    if dense:
        side = res + 1
        return cx + side * (cy + side * cz)
    h = cx.astype(np.uint64) ^ (cy.astype(np.uint64) * np.uint64(PRIME_Y)) ^ (cz.astype(np.uint64) * np.uint64(PRIME_Z))
    return (h & np.uint64(tsize - 1)).astype(np.int64)


def hash_encode(xn, tables, resolutions, dense, with_backward=True):
    """Trilinear multiresolution lookup.

    ``xn`` (M, 3) in [0, 1]; ``tables`` (L, T, F). Returns features (M, L*F)
    plus the corner indices (M, L, 8) and weights (M, L, 8) needed by the
    backward scatter, or ``None`` for both when ``with_backward`` is false.
    """
    xn = np.clip(np.asarray(xn, dtype=np.float64), 0.0, 1.0)
    nlev, tsize, nfeat = tables.shape
    m = xn.shape[0]
    feats = np.zeros((m, nlev * nfeat), dtype=tables.dtype)
    idx = np.empty((m, nlev, 8), dtype=np.int64)
    wts = np.empty((m, nlev, 8), dtype=np.float64)
    for lev in range(nlev):
        res = int(resolutions[lev])
        pos = xn * res
        base = np.minimum(np.floor(pos), res - 1).astype(np.int64)
        frac = pos - base
        acc = np.zeros((m, nfeat))
        for c in range(8):
            ox, oy, oz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            w = ((frac[:, 0] if ox else 1.0 - frac[:, 0])
                 * (frac[:, 1] if oy else 1.0 - frac[:, 1])
                 * (frac[:, 2] if oz else 1.0 - frac[:, 2]))
            ci = _corner_index(base[:, 0] + ox, base[:, 1] + oy, base[:, 2] + oz, res, bool(dense[lev]), tsize)
            idx[:, lev, c] = ci
            wts[:, lev, c] = w
            acc += w[:, None] * tables[lev, ci]
        feats[:, lev * nfeat:(lev + 1) * nfeat] = acc
    if not with_backward:
        return feats, None, None
    return feats, idx, wts


def hash_scatter(grad_feats, idx, wts, shape):
    """Adjoint of ``hash_encode`` w.r.t. the tables: returns (L, T, F) float64."""
    nlev, tsize, nfeat = shape
    out = np.zeros(shape, dtype=np.float64)
    g = np.asarray(grad_feats, dtype=np.float64).reshape(-1, nlev, nfeat)
    for lev in range(nlev):
        ii = idx[:, lev, :].ravel()
        for f in range(nfeat):
            contrib = (wts[:, lev, :] * g[:, lev, f:f + 1]).ravel()
            out[lev, :, f] = np.bincount(ii, weights=contrib, minlength=tsize)
    return out


# --------------------------------------------------------------------------
# A-trous edge-avoiding filter pass
# --------------------------------------------------------------------------

def atrous_pass(color, var, lum, depth, normal, dgrad, mask, stride, sigma_z, sigma_n, sigma_l, eps):
    """One 5x5 a-trous iteration. All inputs float64; returns (color, var)."""
    h, w = depth.shape
    m = mask > 0.5
    pad = 2 * stride

    def padded(a):
        widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (a.ndim - 2)
        return np.pad(a, widths)

    c_p, v_p, l_p, z_p, n_p, m_p = (padded(a) for a in (color, var, lum, depth, normal, m))
    sum_w = np.zeros((h, w))
    acc = np.zeros((h, w, 3))
    acc_v = np.zeros((h, w))
    sd = np.sqrt(np.maximum(var, 0.0))
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            kern = BSPLINE[dy + 2] * BSPLINE[dx + 2]
            sl = (slice(pad + dy * stride, pad + dy * stride + h), slice(pad + dx * stride, pad + dx * stride + w))
            if dx == 0 and dy == 0:
                wgt = np.full((h, w), kern)
            else:
                zq, nq, lq = z_p[sl], n_p[sl], l_p[sl]
                ref = np.abs(dgrad[..., 0] * (dx * stride) + dgrad[..., 1] * (dy * stride))
                wz = np.exp(-np.abs(depth - zq) / (sigma_z * ref + eps))
                wn = np.maximum(0.0, np.sum(normal * nq, axis=-1)) ** sigma_n
                wl = np.exp(-np.abs(lum - lq) / (sigma_l * sd + eps))
                wgt = kern * wz * wn * wl * m_p[sl]
            sum_w += wgt
            acc += wgt[..., None] * (c_p[sl] - color)
            acc_v += wgt * wgt * v_p[sl]
    out = color + acc / sum_w[..., None]
    out_v = acc_v / (sum_w * sum_w)
    out = np.where(m[..., None], out, color)
    out_v = np.where(m, out_v, var)
    return out, out_v


# --------------------------------------------------------------------------
# GELU and fused tracer inference
# --------------------------------------------------------------------------

def gelu_cdf(x):
    from scipy.special import erf

    c = 0.5 * (1.0 + erf(x * np.asarray(0.7071067811865476, dtype=x.dtype)))
    return x * c, c


def gelu_grad(x, cdf, g):
    return g * (cdf + x * (0.3989422804014327 * np.exp(-0.5 * x * x)))


def gelu(x):
    return gelu_cdf(np.asarray(x, dtype=np.float32))[0]


def tracer_infer(prefix, wi, w1d, w2, b2, w3, b3):
    """Reference for the fused kernel: 3-layer MLP logits for ``wi`` (P, K, 3)."""
    h = gelu(prefix[:, None, :] + np.asarray(wi, dtype=np.float32) @ w1d)
    h = gelu(h @ w2 + b2)
    return h @ w3 + b3


# --------------------------------------------------------------------------
# 3x3 'same' convolution (NHWC, weight (9*C, O), tap-major)
# --------------------------------------------------------------------------

def im2col3(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n, h, w, 9 * c)


def conv3x3_forward(x, weight, bias):
    return im2col3(x) @ weight + bias


def conv3x3_backward(x, weight, g):
    n, h, w, c = x.shape
    o = g.shape[-1]
    cols = im2col3(x)
    dw = cols.reshape(-1, 9 * c).T @ g.reshape(-1, o)
    db = g.reshape(-1, o).sum(axis=0)
    dcols = (g @ weight.T).reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=g.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        dxp[:, dy:dy + h, dx:dx + w, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


# --------------------------------------------------------------------------
# Instance norm (NHWC), float64 statistics
# --------------------------------------------------------------------------

def instance_norm_forward(x, scale, shift, eps):
    mean = x.mean(axis=(1, 2), keepdims=True, dtype=np.float64)
    xc = x - mean.astype(x.dtype)
    var = np.mean(np.square(xc, dtype=np.float64), axis=(1, 2), keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    return xhat * scale + shift, xhat, inv


def instance_norm_backward(g, xhat, inv, scale):
    dscale = np.sum(g * xhat, axis=(0, 1, 2), dtype=np.float64)
    dshift = np.sum(g, axis=(0, 1, 2), dtype=np.float64)
    dxhat = g * scale
    m1 = dxhat.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(g.dtype)
    m2 = np.mean(dxhat * xhat, axis=(1, 2), keepdims=True, dtype=np.float64).astype(g.dtype)
    return inv * (dxhat - m1 - xhat * m2), dscale, dshift
