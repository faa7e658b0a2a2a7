# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_kernels_py`` for the reference versions."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, erfc, sqrt, fabs

cnp.import_array()

cdef double ETA_LIMIT = 700.0
cdef double INV_SQRT_2PI = 0.3989422804014327
cdef double INV_SQRT_2 = 0.7071067811865476
cdef double TINY = 2.2250738585072014e-308


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef inline void _cdf_pdf(int code, double eta, double* F, double* S, double* f) nogil:
    # unclamped CDF, survival function and density
    cdef double e = _clip(eta, -ETA_LIMIT, ETA_LIMIT)
    cdef double t, r
    if code == 0:
        t = exp(-fabs(e))
        r = 1.0 / (1.0 + t)
        if e >= 0:
            F[0] = r
            S[0] = t * r
        else:
            F[0] = t * r
            S[0] = r
        f[0] = t * r * r
    elif code == 1:
        F[0] = 0.5 * erfc(-e * INV_SQRT_2)
        S[0] = 0.5 * erfc(e * INV_SQRT_2)
        f[0] = exp(-0.5 * e * e) * INV_SQRT_2PI
    elif code == 2:
        t = exp(-e)
        F[0] = exp(-t)
        S[0] = -expm1(-t)
        f[0] = exp(-e - t)
    else:
        t = exp(e)
        F[0] = -expm1(-t)
        S[0] = exp(-t)
        f[0] = exp(e - t)


def tridiag_factor(diag, off):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dg = np.ascontiguousarray(diag, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] of = np.ascontiguousarray(off, dtype=np.float64)
    cdef Py_ssize_t n = dg.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] l = np.empty(n - 1 if n > 0 else 0)
    cdef Py_ssize_t k
    cdef double piv, lk
    if n == 0:
        return d, l
    piv = dg[0]
    for k in range(n):
        if k > 0:
            lk = of[k - 1] / d[k - 1]
            l[k - 1] = lk
            piv = dg[k] - lk * of[k - 1]
        if not piv > 0.0:
            raise np.linalg.LinAlgError(f"tridiagonal matrix not positive definite (pivot {k})")
        d[k] = piv
    return d, l


def tridiag_solve(d, l, rhs):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dd = np.ascontiguousarray(d, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ll = np.ascontiguousarray(l, dtype=np.float64)
    arr = np.array(rhs, dtype=np.float64, copy=True, order="C")
    was_1d = arr.ndim == 1
    if was_1d:
        arr = arr.reshape(-1, 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = arr
    cdef Py_ssize_t n = dd.shape[0]
    cdef Py_ssize_t m = b.shape[1]
    cdef Py_ssize_t k, c
    cdef double lk, dk
    with nogil:
        for k in range(1, n):
            lk = ll[k - 1]
            for c in range(m):
                b[k, c] -= lk * b[k - 1, c]
        for k in range(n):
            dk = 1.0 / dd[k]
            for c in range(m):
                b[k, c] *= dk
        for k in range(n - 2, -1, -1):
            lk = ll[k]
            for c in range(m):
                b[k, c] -= lk * b[k + 1, c]
    if was_1d:
        return arr.reshape(-1)
    return arr


def expected_information(gamma, eta, X, int link_code):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] e = np.ascontiguousarray(eta, dtype=np.float64)
    cdef Py_ssize_t nobs = e.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x = np.ascontiguousarray(
        np.asarray(X, dtype=np.float64).reshape(nobs, -1))
    cdef Py_ssize_t m = g.shape[0]
    cdef Py_ssize_t p = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] diag = np.zeros(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] off = np.zeros(m - 1 if m > 0 else 0)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] cross = np.zeros((m, p))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bb = np.zeros((p, p))
    # per-observation scratch: F, f at each cut point, weights w_j
    cdef cnp.ndarray[cnp.float64_t, ndim=1] F = np.empty(m + 2)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] S = np.empty(m + 2)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] f = np.empty(m + 2)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] inv = np.empty(m + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] w = np.empty(m + 1)
    cdef Py_ssize_t i, k, a, b
    cdef double pi, delta, s, coef
    with nogil:
        for i in range(nobs):
            F[0] = 0.0
            S[0] = 1.0
            f[0] = 0.0
            F[m + 1] = 1.0
            S[m + 1] = 0.0
            f[m + 1] = 0.0
            for k in range(m):
                _cdf_pdf(link_code, g[k] - e[i], &F[k + 1], &S[k + 1], &f[k + 1])
            s = 0.0
            for k in range(m + 1):
                if F[k + 1] <= 0.5:
                    pi = F[k + 1] - F[k]
                else:
                    pi = S[k] - S[k + 1]
                if pi < TINY:
                    pi = TINY
                inv[k] = 1.0 / pi
                delta = f[k + 1] - f[k]
                w[k] = delta * inv[k]
                s += delta * w[k]
            for k in range(m):
                diag[k] += f[k + 1] * f[k + 1] * (inv[k] + inv[k + 1])
                if k + 1 < m:
                    off[k] -= f[k + 1] * f[k + 2] * inv[k + 1]
                if p:
                    coef = f[k + 1] * (w[k] - w[k + 1])
                    for a in range(p):
                        cross[k, a] -= coef * x[i, a]
            for a in range(p):
                for b in range(p):
                    bb[a, b] += s * x[i, a] * x[i, b]
    return diag, off, cross, bb
