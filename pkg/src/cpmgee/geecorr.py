"""Ordinal GEE with Kronecker-structured working correlation.

Each observation is represented by its ``m = J - 1`` cumulative indicators
``Z_{it,j} = I(Y_it <= y_(j))`` with means ``mu_{it,j} = F(gamma_j - eta_it)``.
The working covariance of cluster ``i`` is
``W_i = S_i^{1/2} (K_i(alpha) kron C) S_i^{1/2}`` with ``S_i`` the diagonal
of indicator variances, ``K_i`` the across-time correlation and ``C`` the
within-time correlation of the indicators.

``C`` and ``K_i`` (exchangeable aside) are correlation matrices of Markov
type, ``corr(p, q) = prod of adjacent factors phi between p and q``, whose
inverses are tridiagonal.  All work is therefore done on ``(n_obs, m)``
arrays with banded operators; neither ``W_i`` nor the indicators are ever
materialised.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import linalg as sla

from ._linalg import BorderedTridiagonal
from .dataset import ClusteredDataset, OrdinalEncoding, encode_ordinal
from .errors import (
    AlphaRangeError,
    ConvergenceError,
    LevelCapError,
    ParameterError,
    SingularMatrixError,
    UnsupportedCombinationError,
)
from .linkfun import LinkFamily, cdf_survival, cell_probability, link_inverse_deriv
from .npmle import (
    FitOptions,
    FitResult,
    Theta,
    _check_theta,
    _design,
    check_monotone,
    fit_independence,
    log_pseudo_likelihood,
    sandwich_covariance,
)

#: Margin kept between alpha and the boundary of its validity interval.
ALPHA_MARGIN = 1e-4
#: Adjacent intercepts closer than this make C numerically singular.
C_SINGULAR_GAP = 1e-10
#: Default cap on the number of levels for non-independence fits.
DEFAULT_MAX_LEVELS = 1000
_GRID_POINTS = 21
_TINY = np.finfo(float).tiny


class CorrStructure(str, enum.Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    AR1 = "ar1"

    @classmethod
    def parse(cls, value) -> "CorrStructure":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ParameterError(f"unknown correlation structure {value!r}; "
                                 f"expected one of {choices}") from None


def _integer_gaps(gaps) -> bool:
    gaps = np.asarray(gaps, dtype=float)
    return bool(np.all(np.abs(gaps - np.round(gaps)) < 1e-12))


def alpha_bounds(structure, cluster_sizes=None, gaps=None) -> tuple:
    """Closed interval of admissible alpha values, margins included.

    Parameters
    ----------
    cluster_sizes : array_like of int, optional
        Needed for the exchangeable lower bound ``-1/(T_max - 1)``.
    gaps : array_like of float, optional
        Within-cluster time gaps; AR1 with non-integer gaps is restricted
        to ``alpha >= 0`` since negative bases have no real fractional power.
    """
    structure = CorrStructure.parse(structure)
    if structure is CorrStructure.INDEPENDENCE:
        return (0.0, 0.0)
    if structure is CorrStructure.EXCHANGEABLE:
        t_max = int(np.max(cluster_sizes)) if cluster_sizes is not None else 2
        lo = -1.0 / (t_max - 1) + ALPHA_MARGIN if t_max >= 2 else -1.0 + ALPHA_MARGIN
        return (lo, 1.0 - ALPHA_MARGIN)
    lo = -1.0 + ALPHA_MARGIN
    if gaps is not None and len(gaps) and not _integer_gaps(gaps):
        lo = 0.0
    return (lo, 1.0 - ALPHA_MARGIN)


@dataclass(frozen=True)
class WorkingCorrelation:
    """Across-time working correlation: structure tag and parameter alpha."""

    structure: CorrStructure
    alpha: Optional[float] = None

    def __post_init__(self):
        s = CorrStructure.parse(self.structure)
        object.__setattr__(self, "structure", s)
        if s is CorrStructure.INDEPENDENCE:
            object.__setattr__(self, "alpha", None)
        elif self.alpha is None or not np.isfinite(self.alpha):
            raise AlphaRangeError(f"{s.value} structure needs a finite alpha")
        else:
            object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def alpha_value(self) -> float:
        return 0.0 if self.alpha is None else self.alpha

    def validate(self, cluster_sizes=None, gaps=None) -> "WorkingCorrelation":
        if self.structure is CorrStructure.INDEPENDENCE:
            return self
        lo, hi = alpha_bounds(self.structure, cluster_sizes, gaps)
        if not (lo <= self.alpha <= hi):
            raise AlphaRangeError(
                f"alpha={self.alpha!r} outside [{lo:.6g}, {hi:.6g}] for {self.structure.value}")
        return self


# -- the within-time factor C -------------------------------------------------


def _markov_inverse(phi, one_minus_phi2):
    """Tridiagonal inverse of a Markov correlation matrix.

    ``phi`` holds the adjacent factors along the last axis (length n-1);
    returns ``(diag, off)`` of the inverse with matching leading axes.
    """
    g = 1.0 / one_minus_phi2
    shape = phi.shape[:-1] + (phi.shape[-1] + 1,)
    diag = np.ones(shape)
    diag[..., :-1] += g - 1.0
    diag[..., 1:] += g - 1.0
    return diag, -phi * g


@dataclass(frozen=True)
class CMatrix:
    """Within-time correlation of the cumulative indicators under the logit link.

    Entry ``(p, q)`` for ``p < q`` is ``exp((gamma_p - gamma_q) / 2)``.  The
    inverse is tridiagonal and available in closed form as
    ``inv_diag``/``inv_off``.
    """

    gamma: np.ndarray
    phi: np.ndarray
    inv_diag: np.ndarray
    inv_off: np.ndarray

    @property
    def size(self) -> int:
        return self.gamma.shape[0]

    @property
    def entries(self) -> np.ndarray:
        g = self.gamma
        return np.exp(-0.5 * np.abs(g[:, None] - g[None, :]))

    def inverse(self) -> np.ndarray:
        m = self.size
        out = np.diag(self.inv_diag)
        if m > 1:
            k = np.arange(m - 1)
            out[k, k + 1] = self.inv_off
            out[k + 1, k] = self.inv_off
        return out


def build_c_matrix(gamma) -> CMatrix:
    gamma = check_monotone(gamma)
    gaps = np.diff(gamma)
    if gaps.size and np.min(gaps) < C_SINGULAR_GAP:
        k = int(np.argmin(gaps))
        raise SingularMatrixError(
            f"intercepts {k + 1} and {k + 2} are within {C_SINGULAR_GAP:g}; the indicator "
            "correlation is numerically singular, merge adjacent levels (bin or round "
            "the response)")
    phi = np.exp(-0.5 * gaps)
    diag, off = _markov_inverse(phi, -np.expm1(-gaps))
    return CMatrix(gamma, phi, diag, off)


def _indicator_markov(F, S):
    """Adjacent correlation factors of indicators at one time point.

    ``F`` and ``S = 1 - F`` are the cumulative means along the last axis.
    Exact for any link: ``corr(Z_p, Z_q) = sqrt(odds_p / odds_q)`` and
    ``1 - phi^2 = pi_{p+1} / (F_{p+1} S_p)`` with ``pi`` the cell probability.
    """
    F0, F1, S0, S1 = F[..., :-1], F[..., 1:], S[..., :-1], S[..., 1:]
    den = np.maximum(F1 * S0, _TINY)
    phi = np.sqrt(F0 * S1 / den)
    omp = np.maximum(cell_probability(F0, S0, F1, S1), _TINY) / den
    return np.minimum(phi, 1.0), np.maximum(omp, _TINY)


# -- the across-time factor K -------------------------------------------------


def build_k_matrix(structure, alpha, times) -> np.ndarray:
    """Dense ``T x T`` across-time working correlation."""
    times = np.asarray(times, dtype=float).reshape(-1)
    T = times.shape[0]
    structure = CorrStructure.parse(structure)
    if structure is CorrStructure.INDEPENDENCE:
        return np.eye(T)
    gaps = np.diff(times)
    WorkingCorrelation(structure, alpha).validate([T], gaps)
    if structure is CorrStructure.EXCHANGEABLE:
        K = np.full((T, T), float(alpha))
        np.fill_diagonal(K, 1.0)
        return K
    lag = np.abs(times[:, None] - times[None, :])
    with np.errstate(divide="ignore"):
        K = np.power(float(alpha), lag)
    np.fill_diagonal(K, 1.0)
    return K


def _ar1_factors(alpha, gaps):
    alpha = float(alpha)
    if alpha == 0.0:
        return np.zeros_like(gaps), np.ones_like(gaps)
    phi = np.sign(alpha) ** np.round(gaps) * np.abs(alpha) ** gaps
    omp = -np.expm1(2.0 * gaps * math.log(abs(alpha)))
    return phi, omp


def _k_inverse_dense(corr: WorkingCorrelation, times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    T = times.shape[0]
    a = corr.alpha_value
    if corr.structure is CorrStructure.INDEPENDENCE or a == 0.0 or T == 1:
        return np.eye(T)
    if corr.structure is CorrStructure.EXCHANGEABLE:
        c = a / (1.0 + (T - 1) * a)
        return (np.eye(T) - c) / (1.0 - a)
    phi, omp = _ar1_factors(a, np.diff(times))
    diag, off = _markov_inverse(phi, omp)
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def _tri_apply(diag, off, A):
    """Multiply by a symmetric tridiagonal matrix along the last axis of ``A``."""
    out = diag * A
    if A.shape[-1] > 1:
        out[..., :-1] += off * A[..., 1:]
        out[..., 1:] += off * A[..., :-1]
    return out


def apply_weight_inverse(mu, corr: WorkingCorrelation, cmat: CMatrix | None, v, times=None):
    """``W_i^{-1} v`` for a single cluster.

    Parameters
    ----------
    mu : ndarray, shape (T_i, J-1)
        Cumulative means, increasing along each row.
    corr : WorkingCorrelation
    cmat : CMatrix or None
        Within-time correlation.  ``None`` uses the exact indicator
        correlation implied by ``mu`` (only with independence across time).
    v : ndarray, shape (T_i * (J-1),)
        Time-major stacking, ``v[t * (J-1) + j]``.
    times : array_like, optional
        Visit times, required for AR1.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    T, m = mu.shape
    V = np.asarray(v, dtype=float).reshape(T, m)
    if np.any(np.diff(mu, axis=1) <= 0.0):
        raise ParameterError("cumulative means must increase across levels")
    s = np.sqrt(mu * (1.0 - mu))
    V = V / s
    if cmat is None:
        if corr.structure is not CorrStructure.INDEPENDENCE:
            raise UnsupportedCombinationError("implied indicator correlation requires independence")
        if m > 1:
            phi, omp = _indicator_markov(mu, 1.0 - mu)
            cd, co = _markov_inverse(phi, omp)
            V = _tri_apply(cd, co, V)
    else:
        if cmat.size != m:
            raise ParameterError("C matrix does not match the number of levels")
        V = _tri_apply(cmat.inv_diag, cmat.inv_off, V)
    times = np.arange(T, dtype=float) if times is None else np.asarray(times, dtype=float)
    if times.shape != (T,):
        raise ParameterError(f"expected {T} visit times, got {times.size}")
    V = _k_inverse_dense(corr, times) @ V
    return (V / s).reshape(-1)


# -- batched GEE quantities ---------------------------------------------------


class _GEEState:
    """Per-theta quantities shared by every alpha probe.

    Arrays are ``(n_obs, m)``.  ``a = f / s`` and ``r = (Z - mu) / s`` are the
    standardised derivative and residual; C^{-1} is applied along the level
    axis once here, and the alpha-dependent K^{-1} along the observation
    axis by :meth:`kinv` (the two operators commute).
    """

    def __init__(self, theta: Theta, data: ClusteredDataset, enc: OrdinalEncoding, link,
                 structure: CorrStructure):
        link = LinkFamily.parse(link)
        rank, X = _design(data, enc)
        _check_theta(theta, enc, X.shape[1])
        if structure is not CorrStructure.INDEPENDENCE and link is not LinkFamily.LOGIT:
            raise UnsupportedCombinationError(
                f"{structure.value} working correlation is only defined for the logit link")
        self.data = data
        self.structure = structure
        self.X = X
        self.p = X.shape[1]
        self.m = m = theta.n_gamma
        eta = X @ theta.beta if self.p else np.zeros(data.n_obs)
        u = theta.gamma[None, :] - eta[:, None]
        F, S = cdf_survival(link, u)
        f = link_inverse_deriv(link, u)
        s = np.sqrt(np.maximum(F * S, _TINY))
        Z = rank[:, None] <= np.arange(1, m + 1)[None, :]
        self.a = f / s
        r = np.where(Z, S, -F) / s
        if link is LinkFamily.LOGIT:
            c = build_c_matrix(theta.gamma)
            self.cd, self.co = c.inv_diag, c.inv_off
        elif m > 1:
            self.cd, self.co = _markov_inverse(*_indicator_markov(F, S))
        else:
            self.cd, self.co = np.ones(1), np.zeros(0)
        self.Cr = self.cinv(r)
        self.aX = [self.a * X[:, [l]] for l in range(self.p)]
        self.CaX = [self.cinv(A) for A in self.aX]
        self.codes = data.cluster_codes
        self.sizes = data.cluster_sizes
        self.gaps = np.diff(data.time)
        self.same = np.diff(self.codes) == 0

    def cinv(self, A):
        return _tri_apply(self.cd, self.co, A)

    def kinv(self, A, alpha: float):
        """Apply the block-diagonal ``K_i^{-1}`` along the observation axis."""
        if self.structure is CorrStructure.INDEPENDENCE or alpha == 0.0:
            return A
        if self.structure is CorrStructure.EXCHANGEABLE:
            c = alpha / (1.0 + (self.sizes - 1) * alpha)
            seg = np.add.reduceat(A, self.data.cluster_starts[:-1], axis=0)
            return (A - (c[:, None] * seg)[self.codes]) / (1.0 - alpha)
        phi, omp = _ar1_factors(alpha, np.where(self.same, self.gaps, 1.0))
        phi = np.where(self.same, phi, 0.0)
        omp = np.where(self.same, omp, 1.0)
        diag, off = _markov_inverse(phi, omp)
        out = diag[:, None] * A
        out[:-1] += off[:, None] * A[1:]
        out[1:] += off[:, None] * A[:-1]
        return out

    def cluster_scores(self, alpha: float) -> np.ndarray:
        """Per-cluster ``u_i = D_i' W_i^{-1} (Z_i - mu_i)``, shape ``(N, m + p)``."""
        w = self.a * self.kinv(self.Cr, alpha)
        parts = [w] + [-(self.X[:, [l]] * w).sum(axis=1, keepdims=True) for l in range(self.p)]
        per_obs = np.concatenate(parts, axis=1)
        return np.add.reduceat(per_obs, self.data.cluster_starts[:-1], axis=0)

    def bread(self, alpha: float) -> BorderedTridiagonal:
        """``sum_i D_i' W_i^{-1} D_i`` as a bordered tridiagonal matrix."""
        a = self.a
        Ka = self.kinv(a, alpha)
        diag = np.sum(self.cd * a * Ka, axis=0) if self.cd.ndim == 2 else \
            self.cd * np.sum(a * Ka, axis=0)
        if self.m > 1:
            if self.co.ndim == 2:
                off = np.sum(self.co * a[:, :-1] * Ka[:, 1:], axis=0)
            else:
                off = self.co * np.sum(a[:, :-1] * Ka[:, 1:], axis=0)
        else:
            off = np.zeros(0)
        cross = np.zeros((self.m, self.p))
        bb = np.zeros((self.p, self.p))
        for l in range(self.p):
            V = self.kinv(self.CaX[l], alpha)
            cross[:, l] = -np.sum(a * V, axis=0)
            rows = np.sum(a * V, axis=1)
            bb[:, l] = self.X.T @ rows
        return BorderedTridiagonal(diag, off, cross, 0.5 * (bb + bb.T))

    def objective(self, alpha: float, criterion: str = "beta") -> float:
        """``log |V(alpha)|`` or ``inf`` when the sandwich is not positive definite.

        ``criterion="beta"`` uses the coefficient block of the covariance;
        ``"theta"`` the full covariance (intercepts and coefficients),
        computed as ``log|meat| - 2 log|bread|``.
        """
        try:
            B = self.bread(alpha)
            U = self.cluster_scores(alpha)
            if criterion == "beta" and self.p:
                V = sandwich_covariance(B, U)[self.m:, self.m:]
                L, _ = sla.cho_factor(V, lower=True)
                return float(2.0 * np.sum(np.log(np.diag(L))))
            logdet_b = B.logdet()
            L, _ = sla.cho_factor(U.T @ U, lower=True)
        except (SingularMatrixError, np.linalg.LinAlgError):
            return math.inf
        return float(2.0 * np.sum(np.log(np.diag(L))) - 2.0 * logdet_b)


def gee_estimating_function(theta: Theta, alpha, data: ClusteredDataset, enc: OrdinalEncoding,
                            link, structure) -> np.ndarray:
    """Sum over clusters of ``D_i' W_i^{-1} (Z_i - mu_i)``."""
    structure = CorrStructure.parse(structure)
    corr = _corr(structure, alpha, data)
    state = _GEEState(theta, data, enc, link, structure)
    return state.cluster_scores(corr.alpha_value).sum(axis=0)


def gee_covariance(theta: Theta, alpha, data: ClusteredDataset, enc: OrdinalEncoding,
                   link, structure) -> np.ndarray:
    """Sandwich covariance with empirical cluster outer products as the meat."""
    structure = CorrStructure.parse(structure)
    corr = _corr(structure, alpha, data)
    state = _GEEState(theta, data, enc, link, structure)
    a = corr.alpha_value
    return sandwich_covariance(state.bread(a), state.cluster_scores(a))


def _corr(structure: CorrStructure, alpha, data: ClusteredDataset) -> WorkingCorrelation:
    if structure is CorrStructure.INDEPENDENCE:
        return WorkingCorrelation(structure)
    return WorkingCorrelation(structure, alpha).validate(data.cluster_sizes, _within_gaps(data))


def _within_gaps(data: ClusteredDataset) -> np.ndarray:
    same = np.diff(data.cluster_codes) == 0
    return np.diff(data.time)[same]


def _golden_section(fun, lo, hi, width):
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - inv_phi * (hi - lo)
    d = lo + inv_phi * (hi - lo)
    fc, fd = fun(c), fun(d)
    while hi - lo > width:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - inv_phi * (hi - lo)
            fc = fun(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv_phi * (hi - lo)
            fd = fun(d)
    return (c, fc) if fc <= fd else (d, fd)


@dataclass(frozen=True)
class AlphaEstimate:
    alpha: float
    objective: float
    bounds: tuple


def estimate_alpha(theta_indep: Theta, data: ClusteredDataset, enc: OrdinalEncoding, link,
                   structure, width: float = 1e-4, bounds: tuple | None = None,
                   criterion: str = "beta") -> AlphaEstimate:
    """Minimise ``log |V(alpha)|`` over the admissible interval.

    A coarse grid locates the basin, golden-section search refines it to
    ``width``, and the result is compared against ``alpha = 0`` and both
    endpoints so it is never worse than any of them.

    Notes
    -----
    The default ``criterion="beta"`` takes the determinant of the
    regression-coefficient block.  ``criterion="theta"`` takes it over all
    ``J - 1 + p`` parameters; once ``J`` is not small relative to the number
    of clusters the intercepts dominate that determinant and its minimiser
    drifts to zero or to the lower boundary, where the working correlation
    is nearly singular.  With no covariates the full determinant is used.
    """
    if criterion not in ("theta", "beta"):
        raise ValueError("criterion must be 'theta' or 'beta'")
    structure = CorrStructure.parse(structure)
    if structure is CorrStructure.INDEPENDENCE:
        raise ParameterError("independence has no association parameter")
    if np.all(data.cluster_sizes == 1):
        warnings.warn("every cluster has a single observation; alpha is not identified "
                      "and is set to 0", stacklevel=2)
        state = _GEEState(theta_indep, data, enc, link, structure)
        return AlphaEstimate(0.0, state.objective(0.0, criterion), (0.0, 0.0))
    lo, hi = bounds if bounds is not None else alpha_bounds(
        structure, data.cluster_sizes, _within_gaps(data))
    if not lo <= hi:
        raise AlphaRangeError(f"empty alpha interval [{lo}, {hi}]")
    state = _GEEState(theta_indep, data, enc, link, structure)
    if (criterion == "theta" or state.p == 0) and data.n_clusters <= state.m + state.p:
        raise SingularMatrixError(
            f"{data.n_clusters} clusters cannot identify {state.m + state.p} parameters "
            "in log|V|; reduce the number of levels (bin or round the response)")
    cache: dict = {}

    def fun(x):
        x = float(x)
        if x not in cache:
            cache[x] = state.objective(x, criterion)
        return cache[x]

    if hi - lo <= width:
        best = min((lo, hi), key=fun)
        return AlphaEstimate(best, fun(best), (lo, hi))
    grid = np.linspace(lo, hi, _GRID_POINTS)
    vals = np.array([fun(x) for x in grid])
    if not np.any(np.isfinite(vals)):
        raise AlphaRangeError("sandwich covariance is singular at every alpha probe")
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    x, fx = _golden_section(fun, a, b, width)
    candidates = [(fx, x), (fun(lo), lo), (fun(hi), hi), (vals[k], grid[k])]
    if lo <= 0.0 <= hi:
        candidates.append((fun(0.0), 0.0))
    fbest, xbest = min(candidates)
    return AlphaEstimate(float(xbest), float(fbest), (lo, hi))


@dataclass(frozen=True)
class GEEOptions:
    """Controls for :func:`one_step_fit`.

    ``outer_iters`` counts alpha estimations; 1 is the one-step estimator.
    ``alpha_fixed`` skips estimation altogether.  ``alpha_criterion`` is
    passed to :func:`estimate_alpha`.
    """

    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 30
    max_levels: int = DEFAULT_MAX_LEVELS
    alpha_fixed: Optional[float] = None
    outer_iters: int = 1
    alpha_criterion: str = "beta"
    independence: FitOptions = FitOptions()

    def __post_init__(self):
        if self.alpha_criterion not in ("theta", "beta"):
            raise ValueError("alpha_criterion must be 'theta' or 'beta'")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be >= 1")
        if self.max_levels < 2:
            raise ValueError("max_levels must be >= 2")


def _scoring(theta: Theta, alpha: float, data, enc, link, structure, options: GEEOptions):
    """Fisher scoring on the estimating equation at fixed alpha.

    A step is halved until the intercepts stay increasing (and separated
    enough for C to be invertible) and the Euclidean norm of the estimating
    function decreases.
    """
    state = _GEEState(theta, data, enc, link, structure)
    U = state.cluster_scores(alpha).sum(axis=0)
    it = 0
    while np.max(np.abs(U)) >= options.tol:
        if it >= options.max_iter:
            return theta, state, U, it, False
        step = state.bread(alpha).solve(U)
        norm = float(U @ U)
        t = 1.0
        for _ in range(options.max_halvings + 1):
            cand = Theta.from_vector(theta.vector + t * step, theta.n_gamma)
            if cand.is_monotone() and np.min(np.diff(cand.gamma), initial=np.inf) >= C_SINGULAR_GAP:
                cand_state = _GEEState(cand, data, enc, link, structure)
                cand_U = cand_state.cluster_scores(alpha).sum(axis=0)
                if float(cand_U @ cand_U) < norm:
                    break
            t *= 0.5
        else:
            return theta, state, U, it, False
        theta, state, U = cand, cand_state, cand_U
        it += 1
    return theta, state, U, it, True


def one_step_fit(data: ClusteredDataset, enc: OrdinalEncoding | None = None, link="logit",
                 structure="exchangeable", options: GEEOptions | None = None) -> FitResult:
    """Independence fit, one alpha estimate, then Fisher scoring at that alpha.

    Raises
    ------
    UnsupportedCombinationError
        Non-logit link with a non-independence structure.
    LevelCapError
        More levels than ``options.max_levels``.
    ConvergenceError
        Fisher scoring did not converge; ``partial`` holds the last iterate.
    """
    options = options or GEEOptions()
    link = LinkFamily.parse(link)
    structure = CorrStructure.parse(structure)
    enc = enc if enc is not None else encode_ordinal(data)
    if structure is CorrStructure.INDEPENDENCE:
        return fit_independence(data, enc, link, options.independence)
    if link is not LinkFamily.LOGIT:
        raise UnsupportedCombinationError(
            f"{structure.value} working correlation is only defined for the logit link; "
            "use --corstr independence for other links")
    if enc.n_levels > options.max_levels:
        raise LevelCapError(
            f"response has {enc.n_levels} distinct values, above the cap of "
            f"{options.max_levels} for {structure.value} fits; reduce the number of "
            "distinct values by binning (--bins M) or rounding (--round d)")
    gaps = _within_gaps(data)
    if options.alpha_fixed is not None:
        WorkingCorrelation(structure, options.alpha_fixed).validate(data.cluster_sizes, gaps)

    ind = fit_independence(data, enc, link, options.independence)
    theta = ind.theta
    notes = list(ind.warnings)
    alpha, objective = None, None
    total_iter = ind.iterations
    done_outer = 0
    converged = True
    for _ in range(options.outer_iters):
        if options.alpha_fixed is not None:
            alpha = float(options.alpha_fixed)
            objective = _GEEState(theta, data, enc, link, structure).objective(
                alpha, options.alpha_criterion)
        else:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                est = estimate_alpha(theta, data, enc, link, structure,
                                     criterion=options.alpha_criterion)
            for w in caught:
                notes.append(str(w.message))
                warnings.warn(w.message, stacklevel=2)
            alpha, objective = est.alpha, est.objective
        theta, state, U, it, converged = _scoring(theta, alpha, data, enc, link, structure,
                                                  options)
        total_iter += it
        done_outer += 1
        if not converged or options.alpha_fixed is not None:
            break

    B = state.bread(alpha)
    try:
        model_cov = B.inverse()
        robust = sandwich_covariance(B, state.cluster_scores(alpha))
    except SingularMatrixError:
        model_cov = np.full((B.shape[0],) * 2, np.nan)
        robust = model_cov.copy()
    result = replace(
        ind,
        theta=theta,
        model_cov=0.5 * (model_cov + model_cov.T),
        robust_cov=robust,
        alpha=float(alpha),
        structure=structure.value,
        loglik=log_pseudo_likelihood(theta, data, enc, link),
        iterations=int(total_iter),
        converged=bool(converged),
        score_norm=float(np.max(np.abs(U))),
        alpha_objective=None if objective is None else float(objective),
        outer_iterations=done_outer,
        warnings=tuple(notes),
    )
    if not converged:
        raise ConvergenceError("Fisher scoring on the estimating equation did not converge",
                               partial=result)
    return result

