/* Vectorisable GELU loops; built with -ffast-math -fopenmp-simd so erff maps to libmvec. */
#ifndef RB_SIMD_H
#define RB_SIMD_H
#include <math.h>
#include <stdlib.h>

static inline void rb_gelu(float *restrict x, long n)
{
#pragma omp simd
    for (long i = 0; i < n; i++) {
        float v = x[i];
        x[i] = 0.5f * v * (1.0f + erff(v * 0.70710678118654752f));
    }
}

/* GELU with a clamped odd/even rational erf (|err| < 5e-7 in float32, no exp);
   inference only, training keeps erff */
static inline void rb_gelu_fast(float *restrict x, long n)
{
#pragma omp simd
    for (long i = 0; i < n; i++) {
        float v = x[i];
        float t = v * 0.70710678118654752f;
        t = t > 4.0f ? 4.0f : (t < -4.0f ? -4.0f : t);
        float t2 = t * t;
        float p = -2.72614225801306e-10f;
        p = p * t2 + 2.77068142495902e-08f;
        p = p * t2 - 2.10102402082508e-06f;
        p = p * t2 - 5.69250639462346e-05f;
        p = p * t2 - 7.34990630326855e-04f;
        p = p * t2 - 2.95459980854025e-03f;
        p = p * t2 - 1.60960333262415e-02f;
        float q = -1.45660718464996e-05f;
        q = q * t2 - 2.13374055278905e-04f;
        q = q * t2 - 1.68282697438203e-03f;
        q = q * t2 - 7.37332916720468e-03f;
        q = q * t2 - 1.42647390514189e-02f;
        x[i] = 0.5f * v * (1.0f + t * p / q);
    }
}

static inline void rb_gelu_cdf(const float *restrict x, float *restrict y, float *restrict cdf, long n)
{
#pragma omp simd
    for (long i = 0; i < n; i++) {
        float v = x[i];
        float c = 0.5f * (1.0f + erff(v * 0.70710678118654752f));
        cdf[i] = c;
        y[i] = v * c;
    }
}

static inline void rb_gelu_grad(const float *restrict x, const float *restrict cdf, const float *restrict g,
                                float *restrict out, long n)
{
#pragma omp simd
    for (long i = 0; i < n; i++) {
        float v = x[i];
        out[i] = g[i] * (cdf[i] + v * 0.39894228040143268f * expf(-0.5f * v * v));
    }
}

/* h[q, :] = gelu(prefix[q / k, :] + wi[q, :] @ w1d) for a tile of queries */
static inline void rb_tracer_layer1(const float *restrict prefix, const float *restrict wi, const float *restrict w1d,
                                    float *restrict h, long q0, long nq, long k, long hid)
{
    for (long j = 0; j < nq; j++) {
        const float *p = prefix + ((q0 + j) / k) * hid;
        const float *d = wi + (q0 + j) * 3;
        float *row = h + j * hid;
        float d0 = d[0], d1 = d[1], d2 = d[2];
#pragma omp simd
        for (long c = 0; c < hid; c++)
            row[c] = p[c] + d0 * w1d[c] + d1 * w1d[hid + c] + d2 * w1d[2 * hid + c];
    }
    rb_gelu_fast(h, nq * hid);
}

/* out[j, o] = b[o] + h[j, :] . wt[o, :] with wt the transposed output weight */
static inline void rb_dense_out(const float *restrict h, const float *restrict wt, const float *restrict b,
                                float *restrict out, long nq, long hid, long nout)
{
    for (long j = 0; j < nq; j++) {
        const float *row = h + j * hid;
        for (long o = 0; o < nout; o++) {
            const float *w = wt + o * hid;
            float acc = 0.0f;
#pragma omp simd reduction(+:acc)
            for (long c = 0; c < hid; c++)
                acc += row[c] * w[c];
            out[j * nout + o] = acc + b[o];
        }
    }
}

/* out = gelu(h1 @ w2 + b2) @ w3 + b3 for hidden width 64, six rows of h1 per
   register block. h1 must have RB_ROWS - 1 readable rows past nq. */
#define RB_ROWS 6
#ifdef __AVX512F__
#include <immintrin.h>
static inline int rb_has_mlp64(void) { return 1; }

static void rb_mlp64_tail(const float *restrict h1, const float *restrict w2, const float *restrict b2,
                          const float *restrict w3t, const float *restrict b3, float *restrict out,
                          long nq, long nout)
{
    float buf[RB_ROWS * 64] __attribute__((aligned(64)));
    __m512 bias[4];
    for (int i = 0; i < 4; i++)
        bias[i] = _mm512_loadu_ps(b2 + 16 * i);
    for (long j0 = 0; j0 < nq; j0 += RB_ROWS) {
        const float *hb = h1 + j0 * 64;
        __m512 acc[RB_ROWS][4];
#pragma GCC unroll 6
        for (int r = 0; r < RB_ROWS; r++)
#pragma GCC unroll 4
            for (int i = 0; i < 4; i++)
                acc[r][i] = bias[i];
#pragma GCC unroll 2
        for (long c = 0; c < 64; c++) {
            const float *wr = w2 + c * 64;
            __m512 w0 = _mm512_loadu_ps(wr), w1 = _mm512_loadu_ps(wr + 16);
            __m512 w2v = _mm512_loadu_ps(wr + 32), w3 = _mm512_loadu_ps(wr + 48);
#pragma GCC unroll 6
            for (int r = 0; r < RB_ROWS; r++) {
                __m512 hv = _mm512_set1_ps(hb[r * 64 + c]);
                acc[r][0] = _mm512_fmadd_ps(hv, w0, acc[r][0]);
                acc[r][1] = _mm512_fmadd_ps(hv, w1, acc[r][1]);
                acc[r][2] = _mm512_fmadd_ps(hv, w2v, acc[r][2]);
                acc[r][3] = _mm512_fmadd_ps(hv, w3, acc[r][3]);
            }
        }
#pragma GCC unroll 6
        for (int r = 0; r < RB_ROWS; r++)
#pragma GCC unroll 4
            for (int i = 0; i < 4; i++)
                _mm512_store_ps(buf + r * 64 + 16 * i, acc[r][i]);
        rb_gelu_fast(buf, RB_ROWS * 64);
        long nr = nq - j0 < RB_ROWS ? nq - j0 : RB_ROWS;
        for (long r = 0; r < nr; r++)
            for (long o = 0; o < nout; o++) {
                const float *w = w3t + o * 64;
                __m512 s = _mm512_mul_ps(_mm512_load_ps(buf + r * 64), _mm512_loadu_ps(w));
                for (int i = 1; i < 4; i++)
                    s = _mm512_fmadd_ps(_mm512_load_ps(buf + r * 64 + 16 * i), _mm512_loadu_ps(w + 16 * i), s);
                out[(j0 + r) * nout + o] = _mm512_reduce_add_ps(s) + b3[o];
            }
    }
}
#else
static inline int rb_has_mlp64(void) { return 0; }

static void rb_mlp64_tail(const float *h1, const float *w2, const float *b2, const float *w3t, const float *b3,
                          float *out, long nq, long nout)
{
    (void)h1; (void)w2; (void)b2; (void)w3t; (void)b3; (void)out; (void)nq; (void)nout;
}
#endif

/* 3x3 convolution over a pre-padded NHWC input xp of shape (n, h + 2, w + 5, c):
   one pixel of zeros top/bottom/left and four on the right so that the
   4-pixel register block may read past the last column. wt is (9, c, o) with
   tap index dy*3 + dx. Specialised on o so accumulators stay in registers. */
#define RB_PIX 4
#define RB_CONV3_FWD(NAME, OW)                                                                          \
static void NAME(const float *restrict xp, const float *restrict wt, const float *restrict b,          \
                 float *restrict y, long n, long h, long w, long c, long o)                              \
{                                                                                                        \
    long wp = w + 5;                                                                                     \
    for (long img = 0; img < n; img++)                                                                   \
        for (long i = 0; i < h; i++)                                                                     \
            for (long j0 = 0; j0 < w; j0 += RB_PIX)                                                      \
                for (long o0 = 0; o0 < o; o0 += OW) {                                                    \
                    float acc[RB_PIX][OW];                                                               \
                    for (long p = 0; p < RB_PIX; p++)                                                    \
                        for (long q = 0; q < OW; q++)                                                    \
                            acc[p][q] = b ? b[o0 + q] : 0.0f;                                            \
                    for (long k = 0; k < 9; k++) {                                                       \
                        long dy = k / 3, dx = k % 3;                                                     \
                        const float *x0 = xp + ((img * (h + 2) + i + dy) * wp + j0 + dx) * c;            \
                        const float *wk = wt + k * c * o + o0;                                           \
                        _Pragma("GCC unroll 1")                                                          \
                        for (long cc = 0; cc < c; cc++) {                                                \
                            const float *wr = wk + cc * o;                                               \
                            for (long p = 0; p < RB_PIX; p++) {                                          \
                                float xv = x0[p * c + cc];                                               \
                                _Pragma("omp simd")                                                      \
                                for (long q = 0; q < OW; q++)                                            \
                                    acc[p][q] += xv * wr[q];                                             \
                            }                                                                            \
                        }                                                                                \
                    }                                                                                    \
                    long np_ = w - j0 < RB_PIX ? w - j0 : RB_PIX;                                        \
                    for (long p = 0; p < np_; p++) {                                                     \
                        float *yp = y + ((img * h + i) * w + j0 + p) * o + o0;                           \
                        for (long q = 0; q < OW; q++)                                                    \
                            yp[q] = acc[p][q];                                                           \
                    }                                                                                    \
                }                                                                                        \
}

RB_CONV3_FWD(rb_conv3_fwd_1, 1)
RB_CONV3_FWD(rb_conv3_fwd_8, 8)
RB_CONV3_FWD(rb_conv3_fwd_16, 16)
RB_CONV3_FWD(rb_conv3_fwd_32, 32)

static void rb_conv3_fwd(const float *xp, const float *wt, const float *b, float *y, long n, long h, long w,
                         long c, long o)
{
    if (o % 32 == 0)
        rb_conv3_fwd_32(xp, wt, b, y, n, h, w, c, o);
    else if (o % 16 == 0)
        rb_conv3_fwd_16(xp, wt, b, y, n, h, w, c, o);
    else if (o % 8 == 0)
        rb_conv3_fwd_8(xp, wt, b, y, n, h, w, c, o);
    else
        rb_conv3_fwd_1(xp, wt, b, y, n, h, w, c, o);
}

/* dw[k, c, :] += xp[p + off_k, c] * g[p, :] and db += g[p, :], with xp padded as above.
   Row-tiled: for each image row, 4 input channels x OW outputs live in
   registers while the row is swept; float32 partial sums are flushed to the
   float64 outputs once per image. */
#define RB_CONV3_WGRAD(NAME, OW)                                                                        \
static void NAME(const float *restrict xp, const float *restrict g, double *restrict dw,               \
                 double *restrict db, long n, long h, long w, long c, long o)                             \
{                                                                                                        \
    long wp = w + 5;                                                                                     \
    float *tmp = (float *)calloc((size_t)(9 * c * o), sizeof(float));                                    \
    float *tb = (float *)calloc((size_t)o, sizeof(float));                                               \
    for (long img = 0; img < n; img++) {                                                                 \
        for (long i = 0; i < h; i++) {                                                                   \
            const float *grow = g + (img * h + i) * w * o;                                               \
            for (long j = 0; j < w; j++)                                                                 \
                for (long q = 0; q < o; q++)                                                             \
                    tb[q] += grow[j * o + q];                                                            \
            for (long k = 0; k < 9; k++) {                                                               \
                long dy = k / 3, dx = k % 3;                                                             \
                const float *xrow = xp + ((img * (h + 2) + i + dy) * wp + dx) * c;                       \
                for (long c0 = 0; c0 < c; c0 += 4) {                                                     \
                    long cb = c - c0 < 4 ? c - c0 : 4;                                                   \
                    for (long o0 = 0; o0 < o; o0 += OW) {                                                \
                        float acc[4][OW];                                                                \
                        for (long p = 0; p < 4; p++)                                                     \
                            for (long q = 0; q < OW; q++)                                                \
                                acc[p][q] = 0.0f;                                                        \
                        _Pragma("GCC unroll 1")                                                          \
                        for (long j = 0; j < w; j++) {                                                   \
                            const float *gp = grow + j * o + o0;                                         \
                            const float *xj = xrow + j * c + c0;                                         \
                            for (long p = 0; p < 4; p++) {                                               \
                                float xv = xj[p];                                                        \
                                _Pragma("omp simd")                                                      \
                                for (long q = 0; q < OW; q++)                                            \
                                    acc[p][q] += xv * gp[q];                                             \
                            }                                                                            \
                        }                                                                                \
                        for (long p = 0; p < cb; p++) {                                                  \
                            float *dr = tmp + (k * c + c0 + p) * o + o0;                                 \
                            for (long q = 0; q < OW; q++)                                                \
                                dr[q] += acc[p][q];                                                      \
                        }                                                                                \
                    }                                                                                    \
                }                                                                                        \
            }                                                                                            \
        }                                                                                                \
        for (long q = 0; q < 9 * c * o; q++) {                                                           \
            dw[q] += tmp[q];                                                                             \
            tmp[q] = 0.0f;                                                                               \
        }                                                                                                \
        for (long q = 0; q < o; q++) {                                                                   \
            db[q] += tb[q];                                                                              \
            tb[q] = 0.0f;                                                                                \
        }                                                                                                \
    }                                                                                                    \
    free(tmp);                                                                                           \
    free(tb);                                                                                            \
}

RB_CONV3_WGRAD(rb_conv3_wgrad_1, 1)
RB_CONV3_WGRAD(rb_conv3_wgrad_8, 8)
RB_CONV3_WGRAD(rb_conv3_wgrad_16, 16)
RB_CONV3_WGRAD(rb_conv3_wgrad_32, 32)

static void rb_conv3_wgrad(const float *xp, const float *g, double *dw, double *db, long n, long h, long w,
                           long c, long o)
{
    if (o % 32 == 0)
        rb_conv3_wgrad_32(xp, g, dw, db, n, h, w, c, o);
    else if (o % 16 == 0)
        rb_conv3_wgrad_16(xp, g, dw, db, n, h, w, c, o);
    else if (o % 8 == 0)
        rb_conv3_wgrad_8(xp, g, dw, db, n, h, w, c, o);
    else
        rb_conv3_wgrad_1(xp, g, dw, db, n, h, w, c, o);
}

/* Instance norm over NHWC, float64 statistics. xhat and per-(n, c) inv std are kept for backward. */
static void rb_inorm_fwd(const float *restrict x, const float *restrict scale, const float *restrict shift,
                         float *restrict y, float *restrict xhat, float *restrict inv, long n, long hw, long c,
                         double eps)
{
    double *mean = (double *)malloc((size_t)c * sizeof(double));
    double *var = (double *)malloc((size_t)c * sizeof(double));
    for (long img = 0; img < n; img++) {
        const float *xi = x + img * hw * c;
        for (long q = 0; q < c; q++)
            mean[q] = 0.0, var[q] = 0.0;
        for (long p = 0; p < hw; p++) {
#pragma omp simd
            for (long q = 0; q < c; q++)
                mean[q] += xi[p * c + q];
        }
        for (long q = 0; q < c; q++)
            mean[q] /= (double)hw;
        for (long p = 0; p < hw; p++) {
#pragma omp simd
            for (long q = 0; q < c; q++) {
                double d = xi[p * c + q] - mean[q];
                var[q] += d * d;
            }
        }
        float *iv = inv + img * c;
        for (long q = 0; q < c; q++)
            iv[q] = (float)(1.0 / sqrt(var[q] / (double)hw + eps));
        float *yi = y + img * hw * c;
        float *hi = xhat + img * hw * c;
        for (long p = 0; p < hw; p++) {
#pragma omp simd
            for (long q = 0; q < c; q++) {
                float h = (xi[p * c + q] - (float)mean[q]) * iv[q];
                hi[p * c + q] = h;
                yi[p * c + q] = h * scale[q] + shift[q];
            }
        }
    }
    free(mean);
    free(var);
}

static void rb_inorm_bwd(const float *restrict g, const float *restrict xhat, const float *restrict inv,
                         const float *restrict scale, float *restrict dx, double *restrict dscale,
                         double *restrict dshift, long n, long hw, long c)
{
    double *s1 = (double *)malloc((size_t)c * sizeof(double));
    double *s2 = (double *)malloc((size_t)c * sizeof(double));
    for (long img = 0; img < n; img++) {
        const float *gi = g + img * hw * c;
        const float *hi = xhat + img * hw * c;
        for (long q = 0; q < c; q++)
            s1[q] = 0.0, s2[q] = 0.0;
        for (long p = 0; p < hw; p++) {
#pragma omp simd
            for (long q = 0; q < c; q++) {
                s1[q] += gi[p * c + q];
                s2[q] += (double)gi[p * c + q] * hi[p * c + q];
            }
        }
        for (long q = 0; q < c; q++) {
            dshift[q] += s1[q];
            dscale[q] += s2[q];
        }
        const float *iv = inv + img * c;
        float *di = dx + img * hw * c;
        for (long p = 0; p < hw; p++) {
#pragma omp simd
            for (long q = 0; q < c; q++) {
                float m1 = (float)(s1[q] / (double)hw) * scale[q];
                float m2 = (float)(s2[q] / (double)hw) * scale[q];
                di[p * c + q] = iv[q] * (gi[p * c + q] * scale[q] - m1 - hi[p * c + q] * m2);
            }
        }
    }
    free(s1);
    free(s2);
}

#endif
