"""Pure-Python/numpy implementations of the hot kernels.

Signatures match the compiled ``_kernels`` extension exactly; the
dispatcher in :mod:`cpmgee.kernels` picks one at import time.
"""

import numpy as np

from . import linkfun

_LINKS = {
    0: linkfun.LinkFamily.LOGIT,
    1: linkfun.LinkFamily.PROBIT,
    2: linkfun.LinkFamily.LOGLOG,
    3: linkfun.LinkFamily.CLOGLOG,
}

# Observations per chunk in expected_information; bounds temporaries at
# roughly _CHUNK_CELLS doubles per array.
_CHUNK_CELLS = 1 << 21


def tridiag_factor(diag, off):
    """LDL^T factorisation of a symmetric positive-definite tridiagonal matrix.

    Returns ``(d, l)`` with pivots ``d`` and sub-diagonal multipliers ``l``.
    Raises ``numpy.linalg.LinAlgError`` on a non-positive pivot.
    """
    diag = np.asarray(diag, dtype=float)
    off = np.asarray(off, dtype=float)
    n = diag.shape[0]
    d = np.empty(n)
    l = np.empty(max(n - 1, 0))
    if n == 0:
        return d, l
    piv = diag[0]
    for k in range(n):
        if k > 0:
            lk = off[k - 1] / d[k - 1]
            l[k - 1] = lk
            piv = diag[k] - lk * off[k - 1]
        if not piv > 0.0:
            raise np.linalg.LinAlgError(f"tridiagonal matrix not positive definite (pivot {k})")
        d[k] = piv
    return d, l


def tridiag_solve(d, l, rhs):
    """Solve ``T x = rhs`` given the factors from :func:`tridiag_factor`.

    ``rhs`` may be 1-D or 2-D (one column per right-hand side).
    """
    b = np.array(rhs, dtype=float, copy=True)
    n = d.shape[0]
    for k in range(1, n):
        b[k] -= l[k - 1] * b[k - 1]
    if b.ndim == 1:
        b /= d
    else:
        b /= d[:, None]
    for k in range(n - 2, -1, -1):
        b[k] -= l[k] * b[k + 1]
    return b


def expected_information(gamma, eta, X, link_code):
    """Fisher information of the cumulative model at ``(gamma, eta)``.

    Returns ``(diag, off, cross, bb)``: the tridiagonal intercept block,
    the intercept/coefficient cross block of shape ``(J-1, p)`` and the
    ``(p, p)`` coefficient block.
    """
    link = _LINKS[int(link_code)]
    gamma = np.asarray(gamma, dtype=float)
    eta = np.asarray(eta, dtype=float)
    X = np.asarray(X, dtype=float).reshape(eta.shape[0], -1)
    m = gamma.shape[0]
    p = X.shape[1]
    diag = np.zeros(m)
    off = np.zeros(max(m - 1, 0))
    cross = np.zeros((m, p))
    bb = np.zeros((p, p))
    step = max(1, _CHUNK_CELLS // max(m + 1, 1))
    tiny = np.finfo(float).tiny
    for start in range(0, eta.shape[0], step):
        e = eta[start:start + step]
        x = X[start:start + step]
        u = gamma[None, :] - e[:, None]
        F, S = linkfun.cdf_survival(link, u)
        f = linkfun.link_inverse_deriv(link, u)
        c = e.shape[0]
        zero, one = np.zeros((c, 1)), np.ones((c, 1))
        Fp = np.concatenate([zero, F, one], axis=1)
        Sp = np.concatenate([one, S, zero], axis=1)
        fp = np.concatenate([zero, f, zero], axis=1)
        pi = linkfun.cell_probability(Fp[:, :-1], Sp[:, :-1], Fp[:, 1:], Sp[:, 1:])
        pi = np.maximum(pi, tiny)
        delta = np.diff(fp, axis=1)
        w = delta / pi
        inv = 1.0 / pi
        diag += np.sum(f * f * (inv[:, :-1] + inv[:, 1:]), axis=0)
        if m > 1:
            off -= np.sum(f[:, :-1] * f[:, 1:] * inv[:, 1:-1], axis=0)
        if p:
            P = f * (w[:, :-1] - w[:, 1:])
            cross -= P.T @ x
            s = np.sum(delta * w, axis=1)
            bb += (x * s[:, None]).T @ x
    return diag, off, cross, bb
