# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""float32 GELU and the fused implicit-tracer inference; built with fast-math."""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport sgemm

cnp.import_array()

cdef extern from "_simd.h" nogil:
    void rb_gelu(float *x, long n)
    void rb_gelu_fast(float *x, long n)
    void rb_gelu_cdf(const float *x, float *y, float *cdf, long n)
    void rb_gelu_grad(const float *x, const float *cdf, const float *g, float *out, long n)
    void rb_tracer_layer1(const float *prefix, const float *wi, const float *w1d, float *h,
                          long q0, long nq, long k, long hid)
    void rb_conv3_fwd(const float *x, const float *wt, const float *b, float *y, long n, long h, long w, long c, long o)
    void rb_conv3_wgrad(const float *x, const float *g, double *dw, double *db, long n, long h, long w, long c, long o)
    void rb_inorm_fwd(const float *x, const float *scale, const float *shift, float *y, float *xhat, float *inv,
                      long n, long hw, long c, double eps)
    void rb_inorm_bwd(const float *g, const float *xhat, const float *inv, const float *scale, float *dx,
                      double *dscale, double *dshift, long n, long hw, long c)
    void rb_dense_out(const float *h, const float *wt, const float *b, float *out, long nq, long hid, long nout)
    int rb_has_mlp64()
    void rb_mlp64_tail(const float *h1, const float *w2, const float *b2, const float *w3t, const float *b3,
                       float *out, long nq, long nout)
    long RB_ROWS

DEF TILE = 1024


def gelu_cdf(x):
    """(gelu(x), Phi(x)) for a float32 array."""
    cdef cnp.ndarray[cnp.float32_t, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] y = np.empty_like(xf)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] c = np.empty_like(xf)
    cdef long n = xf.shape[0]
    if n:
        with nogil:
            rb_gelu_cdf(&xf[0], &y[0], &c[0], n)
    shape = np.shape(x)
    return y.reshape(shape), c.reshape(shape)


def gelu_grad(x, cdf, g):
    cdef cnp.ndarray[cnp.float32_t, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] cf = np.ascontiguousarray(cdf, dtype=np.float32).reshape(-1)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] gf = np.ascontiguousarray(g, dtype=np.float32).reshape(-1)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] out = np.empty_like(xf)
    cdef long n = xf.shape[0]
    if n:
        with nogil:
            rb_gelu_grad(&xf[0], &cf[0], &gf[0], &out[0], n)
    return out.reshape(np.shape(x))


def gelu(x):
    cdef cnp.ndarray[cnp.float32_t, ndim=1] y = np.array(x, dtype=np.float32, copy=True).reshape(-1)
    cdef long n = y.shape[0]
    if n:
        with nogil:
            rb_gelu(&y[0], n)
    return y.reshape(np.shape(x))


def tracer_infer(prefix, wi, w1d, w2, b2, w3, b3):
    """Logits of a 3-layer tracer MLP for ``wi`` (P, K, 3) given the per-point
    first-layer prefix (P, H). Returns (P, K, n_out) float32."""
    cdef cnp.ndarray[cnp.float32_t, ndim=2] pre = np.ascontiguousarray(prefix, dtype=np.float32)
    cdef long p = pre.shape[0], hid = pre.shape[1]
    wi_arr = np.ascontiguousarray(wi, dtype=np.float32)
    cdef long k = wi_arr.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] d = wi_arr.reshape(p * k, 3)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] a1 = np.ascontiguousarray(w1d, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] a2 = np.ascontiguousarray(w2, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] c2 = np.ascontiguousarray(b2, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] a3 = np.ascontiguousarray(np.asarray(w3, dtype=np.float32).T)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] c3 = np.ascontiguousarray(b3, dtype=np.float32)
    cdef long nout = a3.shape[0]
    cdef long total = p * k
    out_np = np.empty((total, nout), dtype=np.float32)
    cdef float[:, ::1] out = out_np
    # spare rows let the register-blocked tail read past the last query
    cdef cnp.ndarray[cnp.float32_t, ndim=2] h1 = np.zeros((TILE + RB_ROWS, hid), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] h2 = np.empty((TILE, hid), dtype=np.float32)
    cdef long q0, nq, j, c, o
    cdef int m_, n_, k_, lda, ldb, ldc
    cdef float one = 1.0
    cdef char tr = b'N'
    cdef bint fused = hid == 64 and rb_has_mlp64()
    if total == 0:
        return out_np.reshape(p, k, nout)
    with nogil:
        q0 = 0
        while q0 < total:
            nq = TILE if total - q0 > TILE else total - q0
            rb_tracer_layer1(&pre[0, 0], &d[0, 0], &a1[0, 0], &h1[0, 0], q0, nq, k, hid)
            if fused:
                rb_mlp64_tail(&h1[0, 0], &a2[0, 0], &c2[0], &a3[0, 0], &c3[0], &out[q0, 0], nq, nout)
                q0 += nq
                continue
            # row-major h2 = h1 @ w2 computed as column-major h2^T = w2^T h1^T
            for j in range(nq):
                for c in range(hid):
                    h2[j, c] = c2[c]
            m_ = <int>hid
            n_ = <int>nq
            k_ = <int>hid
            lda = <int>hid
            ldb = <int>hid
            ldc = <int>hid
            sgemm(&tr, &tr, &m_, &n_, &k_, &one, &a2[0, 0], &lda, &h1[0, 0], &ldb, &one, &h2[0, 0], &ldc)
            rb_gelu_fast(&h2[0, 0], nq * hid)
            rb_dense_out(&h2[0, 0], &a3[0, 0], &c3[0], &out[q0, 0], nq, hid, nout)
            q0 += nq
    return out_np.reshape(p, k, nout)


def _pad(x):
    x = np.asarray(x, dtype=np.float32)
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2, w + 5, c), dtype=np.float32)
    out[:, 1:h + 1, 1:w + 1] = x
    return out


def conv3x3_forward(x, weight, bias):
    """'same' 3x3 convolution of NHWC float32 ``x`` with weight (9*C, O)."""
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xf = _pad(x)
    cdef long n = xf.shape[0], h = xf.shape[1] - 2, w = xf.shape[2] - 5, c = xf.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] wf = np.ascontiguousarray(weight, dtype=np.float32)
    cdef long o = wf.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=1] bf = np.ascontiguousarray(bias, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] y = np.empty((n, h, w, o), dtype=np.float32)
    with nogil:
        rb_conv3_fwd(&xf[0, 0, 0, 0], &wf[0, 0], &bf[0], &y[0, 0, 0, 0], n, h, w, c, o)
    return y


def conv3x3_backward(x, weight, g):
    """(dx, dweight, dbias) of the 3x3 convolution; parameter grads accumulated in float64."""
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xf = _pad(x)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] gf = np.ascontiguousarray(g, dtype=np.float32)
    cdef long n = gf.shape[0], h = gf.shape[1], w = gf.shape[2], c = xf.shape[3], o = gf.shape[3]
    wt = np.asarray(weight, dtype=np.float32).reshape(9, c, o)
    # input gradient is a forward pass of g with the flipped, transposed kernel
    cdef cnp.ndarray[cnp.float32_t, ndim=2] wflip = np.ascontiguousarray(wt[::-1].transpose(0, 2, 1)).reshape(9 * o, c)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] gp = _pad(gf)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] dx = np.empty((n, h, w, c), dtype=np.float32)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dw = np.zeros(9 * c * o, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] db = np.zeros(o, dtype=np.float64)
    with nogil:
        rb_conv3_fwd(&gp[0, 0, 0, 0], &wflip[0, 0], NULL, &dx[0, 0, 0, 0], n, h, w, o, c)
        rb_conv3_wgrad(&xf[0, 0, 0, 0], &gf[0, 0, 0, 0], &dw[0], &db[0], n, h, w, c, o)
    return dx, dw.reshape(9 * c, o), db


def instance_norm_forward(x, scale, shift, double eps):
    """(y, xhat, inv_std) for NHWC float32 ``x``; inv_std has shape (N, 1, 1, C)."""
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xf = np.ascontiguousarray(x, dtype=np.float32)
    cdef long n = xf.shape[0], hw = xf.shape[1] * xf.shape[2], c = xf.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=1] sc = np.ascontiguousarray(scale, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] sh = np.ascontiguousarray(shift, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] y = np.empty_like(xf)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xhat = np.empty_like(xf)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] inv = np.empty((n, 1, 1, c), dtype=np.float32)
    with nogil:
        rb_inorm_fwd(&xf[0, 0, 0, 0], &sc[0], &sh[0], &y[0, 0, 0, 0], &xhat[0, 0, 0, 0], &inv[0, 0, 0, 0],
                     n, hw, c, eps)
    return y, xhat, inv


def instance_norm_backward(g, xhat, inv, scale):
    """(dx, dscale, dshift); parameter grads in float64."""
    cdef cnp.ndarray[cnp.float32_t, ndim=4] gf = np.ascontiguousarray(g, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] hf = np.ascontiguousarray(xhat, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] iv = np.ascontiguousarray(inv, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] sc = np.ascontiguousarray(scale, dtype=np.float32)
    cdef long n = gf.shape[0], hw = gf.shape[1] * gf.shape[2], c = gf.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=4] dx = np.empty_like(gf)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dscale = np.zeros(c, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dshift = np.zeros(c, dtype=np.float64)
    with nogil:
        rb_inorm_bwd(&gf[0, 0, 0, 0], &hf[0, 0, 0, 0], &iv[0, 0, 0, 0], &sc[0], &dx[0, 0, 0, 0],
                     &dscale[0], &dshift[0], n, hw, c)
    return dx, dscale, dshift
