"""Maximum-likelihood fitting of the cumulative probability model.

Every distinct response value is an ordinal level with its own intercept,
``P(Y <= y_(j) | x) = F(gamma_j - beta'x)``.  Observations enter only through
their rank, so the log-likelihood contribution of an observation with rank
``j`` is ``log(F(gamma_j - eta) - F(gamma_{j-1} - eta))`` with
``F(gamma_0 - .) = 0`` and ``F(gamma_J - .) = 1``.

The Hessian couples intercepts only through adjacent levels, so Newton steps
cost ``O(J p^2 + p^3)`` via :class:`~cpmgee._linalg.BorderedTridiagonal`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from ._linalg import BorderedTridiagonal
from .dataset import ClusteredDataset, OrdinalEncoding, encode_ordinal
from .errors import (
    ConvergenceError,
    DimensionError,
    ParameterError,
    RankDeficientError,
    SingularMatrixError,
)
from .linkfun import (
    PROB_CLAMP,
    LinkFamily,
    cdf_survival,
    cell_probability,
    link_eval,
    link_inverse_deriv,
    link_inverse_deriv2,
)

_TINY = np.finfo(float).tiny

#: Parameters larger than this (in absolute value) trigger a separation warning.
SEPARATION_BOUND = 30.0


def _accumulate(idx, weights, minlength):
    # bincount returns integers when ``weights`` is empty
    return np.bincount(idx, weights=weights, minlength=minlength).astype(float, copy=False)


class SeparationWarning(UserWarning):
    """Estimates drifted to very large values; the likelihood may be unbounded."""


def check_monotone(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.size == 0:
        raise ParameterError("need at least one intercept")
    if not np.all(np.isfinite(gamma)):
        raise ParameterError("intercepts must be finite")
    if np.any(np.diff(gamma) <= 0.0):
        raise ParameterError("intercepts must be strictly increasing")
    return gamma


@dataclass(frozen=True)
class Theta:
    """Intercepts ``gamma`` (length J-1) and regression coefficients ``beta``."""

    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float).reshape(-1)
        b = np.array(self.beta, dtype=float).reshape(-1)
        g.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    @property
    def n_gamma(self) -> int:
        return self.gamma.shape[0]

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.beta])

    @classmethod
    def from_vector(cls, v, n_gamma: int) -> "Theta":
        v = np.asarray(v, dtype=float)
        return cls(v[:n_gamma], v[n_gamma:])

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.gamma) > 0.0)) and bool(np.all(np.isfinite(self.vector)))


@dataclass(frozen=True)
class FitResult:
    """Estimates, covariances and convergence metadata of a fitted model.

    ``model_cov`` is the model-based covariance (inverse information) and
    ``robust_cov`` the cluster-robust sandwich; both are ordered as
    ``(gamma_1..gamma_{J-1}, beta_1..beta_p)``.
    """

    theta: Theta
    model_cov: np.ndarray
    robust_cov: np.ndarray
    alpha: Optional[float]
    structure: str
    loglik: float
    iterations: int
    converged: bool
    encoding: OrdinalEncoding
    link: LinkFamily
    covariate_names: tuple = ()
    score_norm: float = float("nan")
    alpha_objective: Optional[float] = None
    outer_iterations: int = 0
    n_obs: int = 0
    n_clusters: int = 0
    warnings: tuple = field(default=())

    @property
    def gamma(self) -> np.ndarray:
        return self.theta.gamma

    @property
    def beta(self) -> np.ndarray:
        return self.theta.beta

    @property
    def levels(self) -> np.ndarray:
        return self.encoding.levels

    @property
    def robust_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.robust_cov), 0.0, None))

    @property
    def beta_se(self) -> np.ndarray:
        return self.robust_se[self.theta.n_gamma:]


@dataclass(frozen=True)
class FitOptions:
    """Newton-Raphson controls.

    ``bread`` chooses the information matrix inside the sandwich:
    ``"expected"`` (Fisher information, the default) or ``"observed"``
    (negated Hessian).  The two agree at the optimum up to O(1/sqrt(N)).
    """

    tol: float = 1e-8
    rel_tol: float = 1e-10
    max_iter: int = 100
    max_halvings: int = 30
    bread: str = "expected"

    def __post_init__(self):
        if self.bread not in ("expected", "observed"):
            raise ValueError("bread must be 'expected' or 'observed'")
        if not (self.tol > 0 and self.rel_tol >= 0 and self.max_iter >= 1):
            raise ValueError("invalid tolerance or iteration limit")


# -- per-observation quantities -----------------------------------------------


@dataclass(frozen=True)
class ObservationScores:
    """Per-observation gradient terms, stored sparsely.

    Observation ``k`` contributes ``upper[k]`` to intercept ``rank[k] - 1``
    (absent for the top level), ``lower[k]`` to intercept ``rank[k] - 2``
    (absent for the bottom level) and ``beta[k]`` to the coefficients.
    Zero-based intercept indices are used throughout.
    """

    rank: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    beta: np.ndarray
    n_gamma: int

    @property
    def dim(self) -> int:
        return self.n_gamma + self.beta.shape[1]

    def _flat(self, rows, n_rows):
        m = self.n_gamma
        hu = self.rank <= m
        hl = self.rank >= 2
        M = self.dim
        idx = np.concatenate([rows[hu] * M + (self.rank[hu] - 1),
                              rows[hl] * M + (self.rank[hl] - 2)])
        val = np.concatenate([self.upper[hu], self.lower[hl]])
        out = _accumulate(idx, weights=val, minlength=n_rows * M).reshape(n_rows, M)
        p = self.beta.shape[1]
        for c in range(p):
            out[:, m + c] = _accumulate(rows, weights=self.beta[:, c], minlength=n_rows)
        return out

    def total(self) -> np.ndarray:
        m = self.n_gamma
        hu = self.rank <= m
        hl = self.rank >= 2
        g = _accumulate(self.rank[hu] - 1, weights=self.upper[hu], minlength=m)
        g += _accumulate(self.rank[hl] - 2, weights=self.lower[hl], minlength=m)
        return np.concatenate([g, self.beta.sum(axis=0)])

    def dense(self) -> np.ndarray:
        """All terms as an ``(n_obs, J-1+p)`` array; for small problems."""
        n = self.rank.shape[0]
        return self._flat(np.arange(n), n)

    def cluster_sums(self, codes, n_clusters: int) -> np.ndarray:
        """Terms summed within clusters, shape ``(n_clusters, J-1+p)``."""
        return self._flat(np.asarray(codes, dtype=np.int64), int(n_clusters))


def _design(data: ClusteredDataset, enc: OrdinalEncoding):
    if enc.rank.shape[0] != data.n_obs:
        raise DimensionError("encoding does not match the dataset")
    return np.asarray(enc.rank, dtype=np.int64), data.covariates


def _check_theta(theta: Theta, enc: OrdinalEncoding, p: int) -> None:
    check_monotone(theta.gamma)
    if theta.n_gamma != enc.n_levels - 1:
        raise DimensionError(f"expected {enc.n_levels - 1} intercepts, got {theta.n_gamma}")
    if theta.beta.shape[0] != p:
        raise DimensionError(f"expected {p} coefficients, got {theta.beta.shape[0]}")


def _bracket(theta: Theta, rank, X, link, order: int):
    """CDF (and derivatives up to ``order``) at both ends of each observation's cell."""
    gamma = theta.gamma
    m = gamma.shape[0]
    eta = X @ theta.beta if X.shape[1] else np.zeros(rank.shape[0])
    hu = rank <= m
    hl = rank >= 2
    u = gamma[np.minimum(rank - 1, m - 1)] - eta
    l = gamma[np.maximum(rank - 2, 0)] - eta
    Fu, Su = cdf_survival(link, u)
    Fl, Sl = cdf_survival(link, l)
    Fu, Su = np.where(hu, Fu, 1.0), np.where(hu, Su, 0.0)
    Fl, Sl = np.where(hl, Fl, 0.0), np.where(hl, Sl, 1.0)
    d = np.maximum(cell_probability(Fl, Sl, Fu, Su), _TINY)
    out = [d]
    if order >= 1:
        out += [np.where(hu, link_inverse_deriv(link, u), 0.0),
                np.where(hl, link_inverse_deriv(link, l), 0.0)]
    if order >= 2:
        out += [np.where(hu, link_inverse_deriv2(link, u), 0.0),
                np.where(hl, link_inverse_deriv2(link, l), 0.0)]
    return out


def log_pseudo_likelihood(theta: Theta, data: ClusteredDataset, enc: OrdinalEncoding,
                          link) -> float:
    """Log-likelihood of the data treating all observations as independent."""
    link = LinkFamily.parse(link)
    rank, X = _design(data, enc)
    _check_theta(theta, enc, X.shape[1])
    (d,) = _bracket(theta, rank, X, link, 0)
    return float(np.sum(np.log(d)))


def score(theta: Theta, data: ClusteredDataset, enc: OrdinalEncoding, link):
    """Gradient of :func:`log_pseudo_likelihood` and its per-observation terms.

    Returns
    -------
    gradient : ndarray, shape (J-1+p,)
    terms : ObservationScores
    """
    link = LinkFamily.parse(link)
    rank, X = _design(data, enc)
    _check_theta(theta, enc, X.shape[1])
    d, fu, fl = _bracket(theta, rank, X, link, 1)
    terms = ObservationScores(rank, fu / d, -fl / d, -X * ((fu - fl) / d)[:, None],
                              theta.n_gamma)
    return terms.total(), terms


def hessian(theta: Theta, data: ClusteredDataset, enc: OrdinalEncoding,
            link) -> BorderedTridiagonal:
    """Observed Hessian of :func:`log_pseudo_likelihood` (negative definite)."""
    link = LinkFamily.parse(link)
    rank, X = _design(data, enc)
    _check_theta(theta, enc, X.shape[1])
    m = theta.n_gamma
    d, fu, fl, du, dl = _bracket(theta, rank, X, link, 2)
    hu = rank <= m
    hl = rank >= 2
    s = fu - fl
    iu = rank[hu] - 1
    il = rank[hl] - 2
    h_uu = du / d - (fu / d) ** 2
    h_ll = -dl / d - (fl / d) ** 2
    diag = _accumulate(iu, weights=h_uu[hu], minlength=m)
    diag += _accumulate(il, weights=h_ll[hl], minlength=m)
    both = hu & hl
    off = _accumulate(rank[both] - 2, weights=(fu * fl / d ** 2)[both], minlength=m)[:m - 1]
    p = X.shape[1]
    cross = np.zeros((m, p))
    c_u = -(du / d - s * fu / d ** 2)
    c_l = -(-dl / d + s * fl / d ** 2)
    for c in range(p):
        cross[:, c] = (_accumulate(iu, weights=(c_u * X[:, c])[hu], minlength=m)
                       + _accumulate(il, weights=(c_l * X[:, c])[hl], minlength=m))
    w = (du - dl) / d - (s / d) ** 2
    bb = (X * w[:, None]).T @ X
    return BorderedTridiagonal(diag, off, cross, bb)


def expected_information(theta: Theta, data: ClusteredDataset, enc: OrdinalEncoding,
                         link) -> BorderedTridiagonal:
    """Fisher information of the independence likelihood at ``theta``.

    Depends on the data only through the covariates; the expectation over
    each observation's level is taken in closed form.
    """
    link = LinkFamily.parse(link)
    rank, X = _design(data, enc)
    _check_theta(theta, enc, X.shape[1])
    eta = X @ theta.beta if X.shape[1] else np.zeros(rank.shape[0])
    diag, off, cross, bb = kernels.expected_information(
        theta.gamma, np.ascontiguousarray(eta), np.ascontiguousarray(X, dtype=float), link.code)
    return BorderedTridiagonal(diag, off, cross, bb)


def sandwich_covariance(information: BorderedTridiagonal, cluster_scores) -> np.ndarray:
    """Cluster-robust covariance ``A^{-1} (sum_i u_i u_i') A^{-1}``.

    Parameters
    ----------
    information : BorderedTridiagonal
        Positive-definite bread ``A`` (negated Hessian or Fisher information).
    cluster_scores : ndarray, shape (n_clusters, J-1+p)
        Per-cluster score sums ``u_i``.
    """
    U = np.asarray(cluster_scores, dtype=float)
    Q = information.solve(np.ascontiguousarray(U.T))
    cov = Q @ Q.T
    return 0.5 * (cov + cov.T)


# -- fitting ------------------------------------------------------------------


def initial_theta(enc: OrdinalEncoding, p: int, link) -> Theta:
    """Intercept-only optimum: link-transformed empirical cumulative proportions."""
    counts = np.bincount(enc.rank, minlength=enc.n_levels + 1)[1:]
    cum = np.cumsum(counts)[:-1] / enc.rank.shape[0]
    gamma = link_eval(link, np.clip(cum, PROB_CLAMP, 1.0 - PROB_CLAMP))
    return Theta(np.asarray(gamma, dtype=float), np.zeros(p))


def check_design(X) -> None:
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if p == 0:
        return
    A = np.column_stack([np.ones(n), X])
    if n < p + 1 or np.linalg.matrix_rank(A) < p + 1:
        raise RankDeficientError(
            "covariates are collinear (with each other or with the intercepts)")


def _maybe_warn_separation(theta: Theta, notes: list) -> None:
    big = np.max(np.abs(theta.vector))
    if big > SEPARATION_BOUND:
        msg = (f"estimate of magnitude {big:.3g} exceeds {SEPARATION_BOUND:g}; "
               "the data may be (quasi-)separated")
        warnings.warn(msg, SeparationWarning, stacklevel=3)
        notes.append(msg)


def _newton_direction(theta, data, enc, link, grad):
    H = hessian(theta, data, enc, link)
    try:
        return (-H).solve(grad)
    except SingularMatrixError:
        # Fisher scoring when the observed Hessian is numerically singular
        return expected_information(theta, data, enc, link).solve(grad)


def fit_independence(data: ClusteredDataset, enc: OrdinalEncoding | None = None,
                     link="logit", options: FitOptions | None = None) -> FitResult:
    """Fit the model under working independence by Newton-Raphson.

    Each step is halved until it keeps the intercepts increasing and does
    not decrease the log-likelihood (a decrease within rounding error is
    accepted when it lowers the score).  Iteration stops when the score's
    max-norm falls below ``options.tol``, or when the relative
    log-likelihood change stays below ``options.rel_tol`` for two
    consecutive steps.

    Raises
    ------
    ConvergenceError
        After ``max_iter`` iterations or a failed line search; ``partial``
        holds a :class:`FitResult` with ``converged=False``.
    """
    options = options or FitOptions()
    link = LinkFamily.parse(link)
    enc = enc if enc is not None else encode_ordinal(data)
    _design(data, enc)
    check_design(data.covariates)
    notes: list = []

    theta = initial_theta(enc, data.n_covariates, link)
    ll = log_pseudo_likelihood(theta, data, enc, link)
    grad, _ = score(theta, data, enc, link)
    converged = False
    failure = None
    stalled = 0
    it = 0
    while it < options.max_iter:
        if np.max(np.abs(grad)) < options.tol:
            converged = True
            break
        step = _newton_direction(theta, data, enc, link, grad)
        noise = 64 * np.finfo(float).eps * max(abs(ll), 1.0)
        t = 1.0
        accepted = None
        best_ll = -np.inf
        for _ in range(options.max_halvings + 1):
            cand = Theta.from_vector(theta.vector + t * step, theta.n_gamma)
            if cand.is_monotone():
                cand_ll = log_pseudo_likelihood(cand, data, enc, link)
                best_ll = max(best_ll, cand_ll)
                if cand_ll >= ll:
                    accepted = (cand, cand_ll)
                    break
                if ll - cand_ll <= noise:
                    # the gain is below rounding error in ll; judge by the score
                    cand_grad, _ = score(cand, data, enc, link)
                    if np.max(np.abs(cand_grad)) < np.max(np.abs(grad)):
                        accepted = (cand, cand_ll)
                        break
            t *= 0.5
        it += 1
        if accepted is None:
            if np.isfinite(best_ll) and abs(best_ll - ll) <= options.rel_tol * abs(ll):
                # no representable improvement left
                converged = True
            else:
                failure = "step-halving failed to find an ascent step"
            break
        new_theta, new_ll = accepted
        change = abs(new_ll - ll) / max(abs(ll), 1.0)
        theta, ll = new_theta, new_ll
        grad, _ = score(theta, data, enc, link)
        # the relative-change rule only ends a run that has stalled twice;
        # Newton usually drives the score below tol one step later
        stalled = stalled + 1 if change < options.rel_tol else 0
        if stalled >= 2:
            converged = True
            break
    else:
        converged = bool(np.max(np.abs(grad)) < options.tol)

    _maybe_warn_separation(theta, notes)
    result = _finish(theta, data, enc, link, options, ll, it, converged, grad, tuple(notes))
    if not converged:
        reason = failure or f"no convergence after {options.max_iter} iterations"
        raise ConvergenceError(reason, partial=result)
    return result


def _finish(theta, data, enc, link, options, ll, iterations, converged, grad, notes):
    grad, terms = score(theta, data, enc, link)
    H = -hessian(theta, data, enc, link)
    try:
        model_cov = H.inverse()
    except SingularMatrixError:
        model_cov = np.full((H.shape[0],) * 2, np.nan)
    bread = H if options.bread == "observed" else expected_information(theta, data, enc, link)
    U = terms.cluster_sums(data.cluster_codes, data.n_clusters)
    try:
        robust = sandwich_covariance(bread, U)
    except SingularMatrixError:
        robust = np.full_like(model_cov, np.nan)
    return FitResult(
        theta=theta,
        model_cov=0.5 * (model_cov + model_cov.T),
        robust_cov=robust,
        alpha=None,
        structure="independence",
        loglik=float(ll),
        iterations=int(iterations),
        converged=bool(converged),
        encoding=enc,
        link=link,
        covariate_names=tuple(data.covariate_names),
        score_norm=float(np.max(np.abs(grad))),
        n_obs=data.n_obs,
        n_clusters=data.n_clusters,
        warnings=notes,
    )
