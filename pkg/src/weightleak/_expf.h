/* fdlibm float expf plus a sequential float32 dense layer.
 * Built with -ffp-contract=off so no multiply-add is fused. */
#ifndef WEIGHTLEAK_EXPF_H
#define WEIGHTLEAK_EXPF_H

#include <stdint.h>
#include <string.h>

/* case codes, same order as mathref.EXPF_CASES */
enum { WL_NAN, WL_INF_POS, WL_INF_NEG, WL_OVERFLOW, WL_UNDERFLOW, WL_FILTERED,
       WL_SCALED, WL_NORMAL, WL_INNER1, WL_INNER2, WL_TOO_SMALL };

static inline uint32_t wl_word(float x) { uint32_t w; memcpy(&w, &x, 4); return w; }
static inline float wl_float(uint32_t w) { float x; memcpy(&x, &w, 4); return x; }

static const float wl_halF[2] = {0.5f, -0.5f};
static const float wl_ln2HI[2] = {6.9313812256e-01f, -6.9313812256e-01f};
static const float wl_ln2LO[2] = {9.0580006145e-06f, -9.0580006145e-06f};

static inline float wl_expf(float x, int *code)
{
    const float one = 1.0f, huge = 1.0e+30f, twom100 = 7.8886090522e-31f;
    const float o_threshold = 8.8721679688e+01f, u_threshold = -1.0397208405e+02f;
    const float invln2 = 1.4426950216e+00f;
    const float P1 = 1.6666667163e-01f, P2 = -2.7777778450e-03f, P3 = 6.6137559770e-05f,
                P4 = -1.6533901999e-06f, P5 = 4.1381369442e-08f;
    volatile float vhuge = huge, vtiny = twom100;
    float y, hi = 0.0f, lo = 0.0f, c, t;
    int32_t k = 0, xsb, filt = 0, near = 0;
    uint32_t hx = wl_word(x);

    xsb = (hx >> 31) & 1;
    hx &= 0x7fffffff;

    if (hx >= 0x42b17218) {
        filt = 1;
        if (hx > 0x7f800000) { *code = WL_NAN; return x + x; }
        if (hx == 0x7f800000) {
            *code = xsb == 0 ? WL_INF_POS : WL_INF_NEG;
            return xsb == 0 ? x : 0.0f;
        }
        if (x > o_threshold) { *code = WL_OVERFLOW; return vhuge * vhuge; }
        if (x < u_threshold) { *code = WL_UNDERFLOW; return vtiny * vtiny; }
    }

    if (hx > 0x3eb17218) {
        if (hx < 0x3F851592) {
            near = 1;
            hi = x - wl_ln2HI[xsb]; lo = wl_ln2LO[xsb]; k = 1 - xsb - xsb;
        } else {
            k = (int32_t)(invln2 * x + wl_halF[xsb]);
            t = (float)k;
            hi = x - t * wl_ln2HI[0];
            lo = t * wl_ln2LO[0];
        }
        x = hi - lo;
    } else if (hx < 0x31800000) {
        if (huge + x > one) { *code = WL_TOO_SMALL; return one + x; }
    } else {
        k = 0;
    }

    t = x * x;
    c = x - t * (P1 + t * (P2 + t * (P3 + t * (P4 + t * P5))));
    if (k == 0) { *code = WL_INNER2; return one - ((x * c) / (c - 2.0f) - x); }
    y = one - ((lo - (x * c) / (2.0f - c)) - hi);
    uint32_t hy = wl_word(y);
    if (k >= -125) {
        *code = near ? WL_INNER1 : WL_NORMAL;
        return wl_float(hy + ((uint32_t)k << 23));
    }
    *code = filt ? WL_FILTERED : WL_SCALED;
    return wl_float(hy + ((uint32_t)(k + 100) << 23)) * twom100;
}

/* out[i] = ((0 + x0*w[i,0]) + x1*w[i,1]) + ... + b[i], all in float32 */
static inline void wl_dense(const float *w, const float *b, const float *x,
                            float *out, int64_t n, int64_t m)
{
    for (int64_t i = 0; i < n; i++) {
        const float *row = w + i * m;
        float acc = 0.0f;
        for (int64_t j = 0; j < m; j++) {
            float p = x[j] * row[j];
            acc = acc + p;
        }
        out[i] = acc + b[i];
    }
}

#endif
