# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused focal-softmax kernel over vocabulary-sized logit rows.

Same contract as kernels.fallback. Rows are processed in cache-sized blocks;
exp stays vectorized through numpy (SIMD) while the row reductions and the
gradient transform run in verbatim-C helpers written so GCC auto-vectorizes
them (restrict pointers, plain reduction loops).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log, exp, pow

cnp.import_array()

cdef extern from *:
    """
    #include <stddef.h>

    #define ROW_HELPERS(SUF, T)                                              \\
    static T row_max_##SUF(const T* restrict z, ptrdiff_t n) {               \\
        T m = z[0];                                                          \\
        for (ptrdiff_t i = 0; i < n; i++) m = z[i] > m ? z[i] : m;           \\
        return m;                                                            \\
    }                                                                        \\
    static ptrdiff_t row_find_##SUF(const T* restrict z, ptrdiff_t n, T v) { \\
        for (ptrdiff_t i = 0; i < n; i++) if (z[i] == v) return i;           \\
        return 0;                                                            \\
    }                                                                        \\
    static double row_sum_##SUF(const T* restrict z, ptrdiff_t n) {          \\
        T acc[16] = {0};                                                     \\
        ptrdiff_t tail = n - (n % 16);                                       \\
        double total = 0.0;                                                  \\
        for (ptrdiff_t v = 0; v < tail; v += 16)                             \\
            for (int i = 0; i < 16; i++) acc[i] += z[v + i];                 \\
        for (int i = 0; i < 16; i++) total += (double) acc[i];               \\
        for (ptrdiff_t v = tail; v < n; v++) total += (double) z[v];         \\
        return total;                                                        \\
    }                                                                        \\
    static void row_scale_##SUF(T* restrict z, ptrdiff_t n, T factor) {      \\
        for (ptrdiff_t i = 0; i < n; i++) z[i] *= factor;                    \\
    }

    ROW_HELPERS(f32, float)
    ROW_HELPERS(f64, double)
    """
    float row_max_f32(const float* z, Py_ssize_t n) noexcept nogil
    double row_max_f64(const double* z, Py_ssize_t n) noexcept nogil
    Py_ssize_t row_find_f32(const float* z, Py_ssize_t n, float v) noexcept nogil
    Py_ssize_t row_find_f64(const double* z, Py_ssize_t n, double v) noexcept nogil
    double row_sum_f32(const float* z, Py_ssize_t n) noexcept nogil
    double row_sum_f64(const double* z, Py_ssize_t n) noexcept nogil
    void row_scale_f32(float* z, Py_ssize_t n, float factor) noexcept nogil
    void row_scale_f64(double* z, Py_ssize_t n, double factor) noexcept nogil


cdef Py_ssize_t BLOCK_ROWS = 64


ctypedef fused real:
    float
    double


cdef inline real _row_max(const real* z, Py_ssize_t n) noexcept nogil:
    if real is float:
        return row_max_f32(z, n)
    else:
        return row_max_f64(z, n)


cdef inline Py_ssize_t _row_find(const real* z, Py_ssize_t n, real v) noexcept nogil:
    if real is float:
        return row_find_f32(z, n, v)
    else:
        return row_find_f64(z, n, v)


cdef inline double _row_sum(const real* z, Py_ssize_t n) noexcept nogil:
    if real is float:
        return row_sum_f32(z, n)
    else:
        return row_sum_f64(z, n)


cdef inline void _row_scale(real* z, Py_ssize_t n, real factor) noexcept nogil:
    if real is float:
        row_scale_f32(z, n, factor)
    else:
        row_scale_f64(z, n, factor)


cdef void _row_stats(Py_ssize_t n, double alpha, double gamma,
                     const real[::1] m, const real[::1] zt, const double[::1] s,
                     double[::1] lnp, double[::1] coeff) noexcept nogil:
    cdef Py_ssize_t r
    cdef double lp, p, onem, c
    for r in range(n):
        lp = ((<double> zt[r]) - (<double> m[r])) - log(s[r])
        p = exp(lp)
        onem = 1.0 - p
        if onem < 0.0:
            onem = 0.0
        if gamma == 0.0:
            c = -alpha
        elif onem == 0.0:
            c = 0.0
        else:
            c = alpha * gamma * pow(onem, gamma - 1.0) * p * lp - alpha * pow(onem, gamma)
        lnp[r] = lp
        coeff[r] = c


def _grad_impl(real[:, ::1] Zv, object Z, object targets, double alpha,
               double gamma, object scale, bint want_argmax):
    cdef Py_ssize_t R = Zv.shape[0]
    cdef Py_ssize_t V = Zv.shape[1]
    dtype = Z.dtype
    loss = np.empty(R, dtype)
    logp = np.empty(R, dtype)
    amax = np.empty(R, np.int64)
    cdef real[::1] scale_v = np.ascontiguousarray(scale, dtype=dtype)
    cdef const long long[::1] tgt = np.ascontiguousarray(targets, dtype=np.int64)
    cdef long long[::1] amax_v = amax
    m_arr = np.empty(BLOCK_ROWS, dtype)
    zt_arr = np.empty(BLOCK_ROWS, dtype)
    s_arr = np.empty(BLOCK_ROWS, np.float64)
    lnp_arr = np.empty(BLOCK_ROWS, np.float64)
    coeff_arr = np.empty(BLOCK_ROWS, np.float64)
    cdef real[::1] m = m_arr
    cdef real[::1] zt = zt_arr
    cdef double[::1] s = s_arr
    cdef double[::1] lnp = lnp_arr
    cdef double[::1] coeff = coeff_arr
    cdef real* zp
    cdef real mv, sc
    cdef Py_ssize_t lo, hi, n, r
    for lo in range(0, R, BLOCK_ROWS):
        hi = min(lo + BLOCK_ROWS, R)
        n = hi - lo
        with nogil:
            for r in range(n):
                zp = &Zv[lo + r, 0]
                mv = _row_max(zp, V)
                if want_argmax:
                    amax_v[lo + r] = _row_find(zp, V, mv)
                m[r] = mv
                zt[r] = zp[tgt[lo + r]]
        blk = Z[lo:hi]
        np.subtract(blk, m_arr[:n, None], out=blk)
        np.exp(blk, out=blk)
        with nogil:
            for r in range(n):
                s[r] = _row_sum(&Zv[lo + r, 0], V)
            _row_stats(n, alpha, gamma, m, zt, s, lnp, coeff)
            # dL/dz = c * (onehot - softmax); rows hold exp(z - m)
            for r in range(n):
                zp = &Zv[lo + r, 0]
                sc = <real> ((<double> scale_v[lo + r]) * coeff[r])
                _row_scale(zp, V, <real> (-(<double> scale_v[lo + r]) * coeff[r] / s[r]))
                zp[tgt[lo + r]] += sc
        loss[lo:hi] = -alpha * (1.0 - np.exp(lnp_arr[:n])).clip(min=0.0) ** gamma * lnp_arr[:n]
        logp[lo:hi] = lnp_arr[:n]
    return loss, logp, (amax if want_argmax else None)


def _loss_impl(real[:, ::1] Zv, object Z, object targets, double alpha,
               double gamma, bint want_argmax):
    cdef Py_ssize_t R = Zv.shape[0]
    cdef Py_ssize_t V = Zv.shape[1]
    dtype = Z.dtype
    loss = np.empty(R, dtype)
    logp = np.empty(R, dtype)
    amax = np.empty(R, np.int64)
    cdef const long long[::1] tgt = np.ascontiguousarray(targets, dtype=np.int64)
    cdef long long[::1] amax_v = amax
    m_arr = np.empty(BLOCK_ROWS, dtype)
    zt_arr = np.empty(BLOCK_ROWS, dtype)
    s_arr = np.empty(BLOCK_ROWS, np.float64)
    lnp_arr = np.empty(BLOCK_ROWS, np.float64)
    coeff_arr = np.empty(BLOCK_ROWS, np.float64)
    cdef real[::1] m = m_arr
    cdef real[::1] zt = zt_arr
    cdef double[::1] s = s_arr
    cdef double[::1] lnp = lnp_arr
    cdef double[::1] coeff = coeff_arr
    tmp = np.empty((BLOCK_ROWS, V), dtype)
    cdef real[:, ::1] tmp_v = tmp
    cdef const real* zp
    cdef real mv
    cdef Py_ssize_t lo, hi, n, r
    for lo in range(0, R, BLOCK_ROWS):
        hi = min(lo + BLOCK_ROWS, R)
        n = hi - lo
        with nogil:
            for r in range(n):
                zp = &Zv[lo + r, 0]
                mv = _row_max(zp, V)
                if want_argmax:
                    amax_v[lo + r] = _row_find(zp, V, mv)
                m[r] = mv
                zt[r] = zp[tgt[lo + r]]
        blk = tmp[:n]
        np.subtract(Z[lo:hi], m_arr[:n, None], out=blk)
        np.exp(blk, out=blk)
        with nogil:
            for r in range(n):
                s[r] = _row_sum(&tmp_v[r, 0], V)
            _row_stats(n, alpha, gamma, m, zt, s, lnp, coeff)
        loss[lo:hi] = -alpha * (1.0 - np.exp(lnp_arr[:n])).clip(min=0.0) ** gamma * lnp_arr[:n]
        logp[lo:hi] = lnp_arr[:n]
    return loss, logp, (amax if want_argmax else None)


def softmax_focal_grad(Z, targets, alpha, gamma, scale, want_argmax=False):
    return _grad_impl(Z, Z, targets, float(alpha), float(gamma), scale, want_argmax)


def softmax_focal_loss(Z, targets, alpha, gamma, want_argmax=False):
    return _loss_impl(Z, Z, targets, float(alpha), float(gamma), want_argmax)
