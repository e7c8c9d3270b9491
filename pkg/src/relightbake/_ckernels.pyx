# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``; identical signatures."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, floor, exp, pow, INFINITY
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

DEF SPHERE = 0
DEF BOX = 1
DEF PLANE = 2

cdef double[5] BSPLINE = [1.0 / 16.0, 1.0 / 4.0, 3.0 / 8.0, 1.0 / 4.0, 1.0 / 16.0]


cdef inline double _prim_sdf(int kind, const double[:, ::1] prm, Py_ssize_t i,
                             double x, double y, double z) noexcept nogil:
    cdef double qx, qy, qz, ox, oy, oz, mx
    if kind == SPHERE:
        qx = x - prm[i, 0]
        qy = y - prm[i, 1]
        qz = z - prm[i, 2]
        return sqrt(qx * qx + qy * qy + qz * qz) - prm[i, 3]
    elif kind == BOX:
        qx = fabs(x - prm[i, 0]) - prm[i, 3]
        qy = fabs(y - prm[i, 1]) - prm[i, 4]
        qz = fabs(z - prm[i, 2]) - prm[i, 5]
        ox = qx if qx > 0.0 else 0.0
        oy = qy if qy > 0.0 else 0.0
        oz = qz if qz > 0.0 else 0.0
        mx = qx
        if qy > mx:
            mx = qy
        if qz > mx:
            mx = qz
        if mx > 0.0:
            mx = 0.0
        return sqrt(ox * ox + oy * oy + oz * oz) + mx
    else:
        return x * prm[i, 0] + y * prm[i, 1] + z * prm[i, 2] - prm[i, 3]


cdef inline double _scene_sdf(const int[::1] kinds, const double[:, ::1] prm,
                              double x, double y, double z, int64_t* best_i) noexcept nogil:
    cdef double best = INFINITY
    cdef double d
    cdef Py_ssize_t i
    best_i[0] = 0
    for i in range(kinds.shape[0]):
        d = _prim_sdf(kinds[i], prm, i, x, y, z)
        if d < best:
            best = d
            best_i[0] = i
    return best


def scene_sdf(kinds, params, points):
    cdef const int[::1] k = np.ascontiguousarray(kinds, dtype=np.int32)
    cdef const double[:, ::1] prm = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t m = p.shape[0], j
    dist_np = np.empty(m, dtype=np.float64)
    idx_np = np.empty(m, dtype=np.int64)
    cdef double[::1] dist = dist_np
    cdef int64_t[::1] idx = idx_np
    cdef int64_t bi
    with nogil:
        for j in range(m):
            dist[j] = _scene_sdf(k, prm, p[j, 0], p[j, 1], p[j, 2], &bi)
            idx[j] = bi
    return dist_np, idx_np


def sphere_trace(kinds, params, origins, dirs, t_min, t_max, double eps, int max_steps):
    cdef const int[::1] k = np.ascontiguousarray(kinds, dtype=np.int32)
    cdef const double[:, ::1] prm = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[:, ::1] o = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef Py_ssize_t m = o.shape[0], j
    cdef const double[::1] tmin = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, dtype=np.float64), (m,)))
    cdef const double[::1] tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (m,)))
    t_np = np.empty(m, dtype=np.float64)
    hit_np = np.zeros(m, dtype=np.bool_)
    prim_np = np.full(m, -1, dtype=np.int64)
    steps_np = np.zeros(m, dtype=np.int64)
    cdef double[::1] t_out = t_np
    cdef unsigned char[::1] hit = hit_np.view(np.uint8)
    cdef int64_t[::1] prim = prim_np
    cdef int64_t[::1] steps = steps_np
    cdef double t, dist
    cdef int s
    cdef int64_t bi
    with nogil:
        for j in range(m):
            t = tmin[j]
            s = 0
            while s < max_steps and t <= tmax[j]:
                dist = _scene_sdf(k, prm, o[j, 0] + t * d[j, 0], o[j, 1] + t * d[j, 1],
                                  o[j, 2] + t * d[j, 2], &bi)
                s += 1
                if dist < eps:
                    hit[j] = 1
                    prim[j] = bi
                    break
                t += dist
            t_out[j] = t
            steps[j] = s
    return t_np, hit_np, prim_np, steps_np


ctypedef fused real:
    float
    double


cdef void _encode(const double[:, ::1] x, const real[:, :, ::1] tab, const int64_t[::1] res,
                  const unsigned char[::1] dn, double[:, ::1] feats, int64_t[:, :, ::1] idx,
                  double[:, :, ::1] wts, bint store) noexcept nogil:
    # the table is read in its own dtype; a float32 desk table stays L2-resident
    cdef Py_ssize_t m = x.shape[0], nlev = tab.shape[0], nfeat = tab.shape[2]
    cdef uint64_t tmask = <uint64_t>(tab.shape[1] - 1)
    cdef Py_ssize_t j, lev, c, f
    cdef int64_t r, side, bx, by, bz, cx, cy, cz, ci
    cdef double px, py, pz, fx, fy, fz, w
    cdef uint64_t hsh
    for j in range(m):
        for lev in range(nlev):
            r = res[lev]
            px = x[j, 0] * r
            py = x[j, 1] * r
            pz = x[j, 2] * r
            bx = <int64_t>floor(px)
            by = <int64_t>floor(py)
            bz = <int64_t>floor(pz)
            if bx > r - 1:
                bx = r - 1
            if by > r - 1:
                by = r - 1
            if bz > r - 1:
                bz = r - 1
            fx = px - bx
            fy = py - by
            fz = pz - bz
            side = r + 1
            for c in range(8):
                cx = bx + (c & 1)
                cy = by + ((c >> 1) & 1)
                cz = bz + ((c >> 2) & 1)
                w = (fx if (c & 1) else 1.0 - fx) * (fy if ((c >> 1) & 1) else 1.0 - fy) \
                    * (fz if ((c >> 2) & 1) else 1.0 - fz)
                if dn[lev]:
                    ci = cx + side * (cy + side * cz)
                else:
                    hsh = (<uint64_t>cx) ^ ((<uint64_t>cy) * <uint64_t>2654435761) ^ ((<uint64_t>cz) * <uint64_t>805459861)
                    ci = <int64_t>(hsh & tmask)
                if store:
                    idx[j, lev, c] = ci
                    wts[j, lev, c] = w
                for f in range(nfeat):
                    feats[j, lev * nfeat + f] += w * <double>tab[lev, ci, f]


def hash_encode(xn, tables, resolutions, dense, with_backward=True):
    cdef const double[:, ::1] x = np.ascontiguousarray(np.clip(np.asarray(xn, dtype=np.float64), 0.0, 1.0))
    tables_np = np.ascontiguousarray(tables)
    if tables_np.dtype != np.float32:
        tables_np = tables_np.astype(np.float64, copy=False)
    cdef const int64_t[::1] res = np.ascontiguousarray(resolutions, dtype=np.int64)
    cdef const unsigned char[::1] dn = np.ascontiguousarray(dense, dtype=np.uint8)
    cdef Py_ssize_t m = x.shape[0], nlev = tables_np.shape[0], nfeat = tables_np.shape[2]
    cdef bint store = bool(with_backward)
    cdef Py_ssize_t bm = m if store else 1, bl = nlev if store else 1
    feats_np = np.zeros((m, nlev * nfeat), dtype=np.float64)
    idx_np = np.empty((bm, bl, 8), dtype=np.int64)
    wts_np = np.empty((bm, bl, 8), dtype=np.float64)
    cdef double[:, ::1] feats = feats_np
    cdef int64_t[:, :, ::1] idx = idx_np
    cdef double[:, :, ::1] wts = wts_np
    cdef const float[:, :, ::1] t32
    cdef const double[:, :, ::1] t64
    if tables_np.dtype == np.float32:
        t32 = tables_np
        with nogil:
            _encode(x, t32, res, dn, feats, idx, wts, store)
    else:
        t64 = tables_np
        with nogil:
            _encode(x, t64, res, dn, feats, idx, wts, store)
    feats_out = feats_np.astype(tables_np.dtype, copy=False)
    if not store:
        return feats_out, None, None
    return feats_out, idx_np, wts_np


def hash_scatter(grad_feats, idx_in, wts_in, shape):
    cdef Py_ssize_t nlev = shape[0], tsize = shape[1], nfeat = shape[2]
    out_np = np.zeros((nlev, tsize, nfeat), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    cdef const double[:, ::1] g = np.ascontiguousarray(np.asarray(grad_feats, dtype=np.float64).reshape(-1, nlev * nfeat))
    cdef const int64_t[:, :, ::1] idx = np.ascontiguousarray(idx_in, dtype=np.int64)
    cdef const double[:, :, ::1] wts = np.ascontiguousarray(wts_in, dtype=np.float64)
    cdef Py_ssize_t m = g.shape[0], j, lev, c, f
    cdef int64_t ci
    cdef double w
    with nogil:
        for j in range(m):
            for lev in range(nlev):
                for c in range(8):
                    ci = idx[j, lev, c]
                    w = wts[j, lev, c]
                    for f in range(nfeat):
                        out[lev, ci, f] += w * g[j, lev * nfeat + f]
    return out_np


def atrous_pass(color, var, lum, depth, normal, dgrad, mask, int stride,
                double sigma_z, double sigma_n, double sigma_l, double eps):
    cdef const double[:, :, ::1] col = np.ascontiguousarray(color, dtype=np.float64)
    cdef const double[:, ::1] vr = np.ascontiguousarray(var, dtype=np.float64)
    cdef const double[:, ::1] lm = np.ascontiguousarray(lum, dtype=np.float64)
    cdef const double[:, ::1] z = np.ascontiguousarray(depth, dtype=np.float64)
    cdef const double[:, :, ::1] nrm = np.ascontiguousarray(normal, dtype=np.float64)
    cdef const double[:, :, ::1] dg = np.ascontiguousarray(dgrad, dtype=np.float64)
    cdef const double[:, ::1] msk = np.ascontiguousarray(mask, dtype=np.float64)
    cdef Py_ssize_t h = z.shape[0], w = z.shape[1], i, j, qi, qj
    cdef int dy, dx
    out_np = np.array(col, copy=True)
    outv_np = np.array(vr, copy=True)
    cdef double[:, :, ::1] out = out_np
    cdef double[:, ::1] outv = outv_np
    cdef double sw, a0, a1, a2, av, kern, wgt, ref, wz, wn, wl, sd, nd
    with nogil:
        for i in range(h):
            for j in range(w):
                if msk[i, j] <= 0.5:
                    continue
                sd = sqrt(vr[i, j]) if vr[i, j] > 0.0 else 0.0
                sw = 0.0
                a0 = 0.0
                a1 = 0.0
                a2 = 0.0
                av = 0.0
                for dy in range(-2, 3):
                    qi = i + dy * stride
                    if qi < 0 or qi >= h:
                        continue
                    for dx in range(-2, 3):
                        qj = j + dx * stride
                        if qj < 0 or qj >= w:
                            continue
                        kern = BSPLINE[dy + 2] * BSPLINE[dx + 2]
                        if dx == 0 and dy == 0:
                            wgt = kern
                        else:
                            if msk[qi, qj] <= 0.5:
                                continue
                            ref = fabs(dg[i, j, 0] * (dx * stride) + dg[i, j, 1] * (dy * stride))
                            wz = exp(-fabs(z[i, j] - z[qi, qj]) / (sigma_z * ref + eps))
                            nd = nrm[i, j, 0] * nrm[qi, qj, 0] + nrm[i, j, 1] * nrm[qi, qj, 1] + nrm[i, j, 2] * nrm[qi, qj, 2]
                            wn = pow(nd, sigma_n) if nd > 0.0 else 0.0
                            wl = exp(-fabs(lm[i, j] - lm[qi, qj]) / (sigma_l * sd + eps))
                            wgt = kern * wz * wn * wl
                        sw += wgt
                        a0 += wgt * (col[qi, qj, 0] - col[i, j, 0])
                        a1 += wgt * (col[qi, qj, 1] - col[i, j, 1])
                        a2 += wgt * (col[qi, qj, 2] - col[i, j, 2])
                        av += wgt * wgt * vr[qi, qj]
                out[i, j, 0] = col[i, j, 0] + a0 / sw
                out[i, j, 1] = col[i, j, 1] + a1 / sw
                out[i, j, 2] = col[i, j, 2] + a2 / sw
                outv[i, j] = av / (sw * sw)
    return out_np, outv_np
