"""Symmetric matrices with a tridiagonal leading block and a dense border.

Both the negated log-likelihood Hessian and the GEE bread have the form::

    [ T   B ]     T : (m, m) symmetric tridiagonal (intercepts)
    [ B'  D ]     B : (m, p) dense, D : (p, p) dense (coefficients)

Solves use block elimination: LDL^T of ``T`` in O(m), then a dense
``p x p`` Schur complement.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
from scipy import linalg as sla
from scipy import sparse

from . import kernels
from .errors import SingularMatrixError


class BorderedTridiagonal:
    def __init__(self, diag, off, cross, bb):
        self.diag = np.asarray(diag, dtype=float)
        self.off = np.asarray(off, dtype=float)
        m = self.diag.shape[0]
        self.cross = np.asarray(cross, dtype=float).reshape(m, -1)
        self.bb = np.asarray(bb, dtype=float).reshape(self.cross.shape[1], self.cross.shape[1])

    @property
    def n_gamma(self) -> int:
        return self.diag.shape[0]

    @property
    def n_beta(self) -> int:
        return self.bb.shape[0]

    @property
    def shape(self):
        n = self.n_gamma + self.n_beta
        return (n, n)

    def __neg__(self):
        return BorderedTridiagonal(-self.diag, -self.off, -self.cross, -self.bb)

    def __add__(self, other):
        return BorderedTridiagonal(self.diag + other.diag, self.off + other.off,
                                   self.cross + other.cross, self.bb + other.bb)

    def scale(self, c):
        return BorderedTridiagonal(c * self.diag, c * self.off, c * self.cross, c * self.bb)

    def to_sparse(self):
        m, p = self.n_gamma, self.n_beta
        T = sparse.diags([self.off, self.diag, self.off], [-1, 0, 1], shape=(m, m))
        return sparse.bmat([[T, sparse.csr_matrix(self.cross)],
                            [sparse.csr_matrix(self.cross.T), sparse.csr_matrix(self.bb)]],
                           format="csr")

    def to_dense(self):
        m, p = self.n_gamma, self.n_beta
        out = np.zeros((m + p, m + p))
        idx = np.arange(m)
        out[idx, idx] = self.diag
        out[idx[:-1], idx[1:]] = self.off
        out[idx[1:], idx[:-1]] = self.off
        out[:m, m:] = self.cross
        out[m:, :m] = self.cross.T
        out[m:, m:] = self.bb
        return out

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        m = self.n_gamma
        vg, vb = v[:m], v[m:]
        out_g = self.diag * vg + self.cross @ vb
        out_g[:-1] += self.off * vg[1:]
        out_g[1:] += self.off * vg[:-1]
        out_b = self.cross.T @ vg + self.bb @ vb
        return np.concatenate([out_g, out_b])

    # -- factorisation (positive-definite matrices only) --------------------

    @cached_property
    def _factors(self):
        try:
            d, l = kernels.tridiag_factor(self.diag, self.off)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError(f"intercept block is not positive definite: {exc}") from None
        Y = kernels.tridiag_solve(d, l, self.cross) if self.n_beta else self.cross
        schur = self.bb - self.cross.T @ Y
        try:
            chol = sla.cho_factor(schur, lower=True) if self.n_beta else None
        except np.linalg.LinAlgError:
            raise SingularMatrixError("coefficient Schur complement is not positive definite") from None
        return d, l, Y, chol

    def solve(self, rhs):
        """Solve ``M x = rhs`` for 1-D or column-stacked 2-D ``rhs``."""
        d, l, Y, chol = self._factors
        rhs = np.asarray(rhs, dtype=float)
        m = self.n_gamma
        rg, rb = rhs[:m], rhs[m:]
        xg = kernels.tridiag_solve(d, l, rg)
        if chol is None:
            return xg
        xb = sla.cho_solve(chol, rb - self.cross.T @ xg)
        xg = xg - Y @ xb
        return np.concatenate([xg, xb], axis=0)

    def logdet(self) -> float:
        d, _, _, chol = self._factors
        out = float(np.sum(np.log(d)))
        if chol is not None:
            out += 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
        return out

    def inverse(self):
        """Dense inverse, assembled blockwise."""
        d, l, Y, chol = self._factors
        m, p = self.n_gamma, self.n_beta
        out = np.empty((m + p, m + p))
        out[:m, :m] = kernels.tridiag_solve(d, l, np.eye(m))
        if p:
            sinv = sla.cho_solve(chol, np.eye(p))
            YS = Y @ sinv
            out[:m, :m] += YS @ Y.T
            out[:m, m:] = -YS
            out[m:, :m] = -YS.T
            out[m:, m:] = sinv
        return out
