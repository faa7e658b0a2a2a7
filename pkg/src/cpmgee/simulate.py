"""Monte-Carlo studies of the estimators on clustered transformed-linear data.

Data follow ``Y*_it = X_i b_X + T_it b_T + e_it`` with
``Y_it = chi2_5^{-1}(Phi(Y*_it) / 2)``.  Within-cluster dependence of the
residuals comes from a Gaussian copula with exchangeable or AR(1)
correlation on the visit index, so the copula parameter is not the Pearson
correlation of logistic margins (it is slightly larger).
"""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy import integrate, special, stats

from . import conditional, geecorr, npmle
from .dataset import ClusteredDataset, bin_equal_quantile, round_responses
from .errors import ConfigError, ConvergenceError, CPMGEEError

CHI2_DF = 5
RESIDUALS = ("logistic", "normal")
TRUE_STRUCTURES = ("exchangeable", "ar1")
TRANSFORMS = ("identity", "exp")
TARGET_KINDS = ("mean", "median", "cdf")
FAILURE_THRESHOLD = 0.10
QUAD_TOL = 1e-6


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator: a working structure plus optional response coarsening."""

    name: str
    structure: str = "independence"
    link: str = "logit"
    bins: Optional[int] = None
    round: Optional[int] = None
    alpha_criterion: str = "beta"
    max_levels: int = geecorr.DEFAULT_MAX_LEVELS


@dataclass(frozen=True)
class TargetSpec:
    """A conditional estimand at covariates ``(x, t)``; ``y`` only for ``cdf``."""

    kind: str
    x: float = 1.0
    t: float = 0.2
    y: Optional[float] = None

    @property
    def label(self) -> str:
        at = f"X={self.x:g},T={self.t:g}"
        if self.kind == "mean":
            return f"E(Y|{at})"
        if self.kind == "median":
            return f"Q(0.5|{at})"
        return f"F({self.y:g}|{at})"


def _default_estimators():
    return (EstimatorSpec("cpm_ind"), EstimatorSpec("cpm_ex", "exchangeable", bins=100))


def _default_targets():
    return (TargetSpec("mean"), TargetSpec("median"), TargetSpec("cdf", y=5.0))


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``coef_scale`` multiplies the true coefficients before they are compared
    with estimates, for fitting a link that does not match the residual
    distribution; ``None`` means 1 when they match (logit with logistic,
    probit with normal) and 1.7 otherwise.  ``transform`` is applied to the
    generated responses; conditional targets then refer to the transformed
    scale.
    """

    n_clusters: int = 200
    max_cluster: int = 6
    beta_x: float = 1.0
    beta_t: float = 1.0
    alpha_true: float = 0.7
    residual: str = "logistic"
    structure_true: str = "exchangeable"
    dropout: bool = True
    reps: int = 200
    seed: int = 0
    estimators: tuple = field(default_factory=_default_estimators)
    targets: tuple = field(default_factory=_default_targets)
    reference: Optional[str] = None
    time_step: float = 0.2
    coef_scale: Optional[float] = None
    level: float = 0.95
    transform: str = "identity"

    def __post_init__(self):
        self.validate()

    # -- validation -----------------------------------------------------------

    def validate(self) -> None:
        def need(ok, path, msg):
            if not ok:
                raise ConfigError(msg, path=path)

        def is_int(v):
            return isinstance(v, (int, np.integer)) and not isinstance(v, bool)

        def is_real(v):
            return isinstance(v, (int, float, np.number)) and not isinstance(v, bool) \
                and math.isfinite(v)

        need(is_int(self.n_clusters) and self.n_clusters >= 2, "n_clusters", "must be an integer >= 2")
        need(is_int(self.max_cluster) and self.max_cluster >= 2, "max_cluster",
             "must be an integer >= 2")
        need(is_int(self.reps) and self.reps >= 1, "reps", "must be an integer >= 1")
        need(is_int(self.seed) and 0 <= self.seed < 2 ** 64, "seed",
             "must be an integer in [0, 2**64)")
        for name in ("beta_x", "beta_t", "alpha_true", "time_step"):
            need(is_real(getattr(self, name)), name, "must be a finite number")
        need(self.residual in RESIDUALS, "residual", f"must be one of {RESIDUALS}")
        need(self.structure_true in TRUE_STRUCTURES, "structure_true",
             f"must be one of {TRUE_STRUCTURES}")
        need(self.transform in TRANSFORMS, "transform", f"must be one of {TRANSFORMS}")
        need(isinstance(self.dropout, bool), "dropout", "must be true or false")
        lo = -1.0 / (self.max_cluster - 1) if self.structure_true == "exchangeable" else -1.0
        need(lo < self.alpha_true < 1.0, "alpha_true",
             f"must lie in ({lo:g}, 1) for {self.structure_true}")
        need(is_real(self.level) and 0.0 < self.level < 1.0, "level", "must lie in (0, 1)")
        need(self.coef_scale is None or (is_real(self.coef_scale) and self.coef_scale > 0),
             "coef_scale", "must be a positive number or null")
        need(len(self.estimators) >= 1, "estimators", "at least one estimator is required")
        names = set()
        for k, est in enumerate(self.estimators):
            path = f"estimators[{k}]"
            need(isinstance(est, EstimatorSpec), path, "must be an estimator object")
            need(bool(est.name) and est.name not in names, f"{path}.name",
                 "must be a unique non-empty string")
            names.add(est.name)
            try:
                geecorr.CorrStructure.parse(est.structure)
            except ValueError as exc:
                raise ConfigError(str(exc), path=f"{path}.structure") from None
            need(est.link in ("logit", "probit", "loglog", "cloglog"), f"{path}.link",
                 "must be logit, probit, loglog or cloglog")
            need(est.bins is None or est.round is None, path, "bins and round are exclusive")
            need(est.bins is None or (is_int(est.bins) and est.bins >= 2), f"{path}.bins",
                 "must be an integer >= 2")
            need(est.round is None or (is_int(est.round) and est.round >= 0), f"{path}.round",
                 "must be an integer >= 0")
            need(est.alpha_criterion in ("beta", "theta"), f"{path}.alpha_criterion",
                 "must be 'beta' or 'theta'")
            need(is_int(est.max_levels) and est.max_levels >= 2, f"{path}.max_levels",
                 "must be an integer >= 2")
        for k, tgt in enumerate(self.targets):
            path = f"targets[{k}]"
            need(isinstance(tgt, TargetSpec), path, "must be a target object")
            need(tgt.kind in TARGET_KINDS, f"{path}.kind", f"must be one of {TARGET_KINDS}")
            need(is_real(tgt.x) and is_real(tgt.t), path, "x and t must be finite numbers")
            need(tgt.kind != "cdf" or (tgt.y is not None and is_real(tgt.y)), f"{path}.y",
                 "cdf targets need a finite y")
        need(self.reference is None or self.reference in names, "reference",
             "must name one of the estimators")

    # -- (de)serialisation ------------------------------------------------------

    @property
    def reference_name(self) -> str:
        return self.reference if self.reference is not None else self.estimators[0].name

    @property
    def effective_coef_scale(self) -> float:
        if self.coef_scale is not None:
            return float(self.coef_scale)
        matched = {"logistic": "logit", "normal": "probit"}[self.residual]
        return 1.0 if all(e.link == matched for e in self.estimators) else 1.7

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimators"] = [asdict(e) for e in self.estimators]
        out["targets"] = [asdict(t) for t in self.targets]
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "SimConfig":
        if not isinstance(payload, dict):
            raise ConfigError("configuration must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in payload.items():
            if key not in allowed:
                raise ConfigError("unknown field", path=key)
            kwargs[key] = value
        if "estimators" in kwargs:
            kwargs["estimators"] = tuple(_from_items(EstimatorSpec, kwargs["estimators"],
                                                     "estimators"))
        if "targets" in kwargs:
            kwargs["targets"] = tuple(_from_items(TargetSpec, kwargs["targets"], "targets"))
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path) as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(payload)


def _from_items(kind, items, path):
    if not isinstance(items, list):
        raise ConfigError("must be a list", path=path)
    allowed = {f.name for f in fields(kind)}
    out = []
    for k, item in enumerate(items):
        if not isinstance(item, dict):
            raise ConfigError("must be an object", path=f"{path}[{k}]")
        for key in item:
            if key not in allowed:
                raise ConfigError("unknown field", path=f"{path}[{k}].{key}")
        try:
            out.append(kind(**item))
        except TypeError as exc:
            raise ConfigError(str(exc), path=f"{path}[{k}]") from None
    return out


# ---------------------------------------------------------------------------
# data generation and truth
# ---------------------------------------------------------------------------

def _transform(config: SimConfig):
    if config.transform == "exp":
        return np.exp, np.log
    return (lambda v: v), (lambda v: v)


def copula_correlation(config: SimConfig) -> np.ndarray:
    M = config.max_cluster
    if config.structure_true == "exchangeable":
        K = np.full((M, M), float(config.alpha_true))
        np.fill_diagonal(K, 1.0)
        return K
    lag = np.abs(np.subtract.outer(np.arange(M), np.arange(M)))
    return float(config.alpha_true) ** lag


def to_response(latent) -> np.ndarray:
    return stats.chi2.ppf(special.ndtr(latent) / 2.0, CHI2_DF)


def generate_dataset(config: SimConfig, rng: np.random.Generator) -> ClusteredDataset:
    """Draw one clustered dataset.

    Cluster ``i`` has covariate ``X_i ~ N(0, 1)``, visits ``k = 0..T_i-1``
    with ``T = k * time_step``, and ``T_i = max_cluster`` unless dropout is on,
    in which case ``T_i`` is uniform on ``{2, ..., max_cluster}``.  The
    dataset time column is the visit index.
    """
    N, M = config.n_clusters, config.max_cluster
    L = np.linalg.cholesky(copula_correlation(config))
    z = rng.standard_normal((N, M)) @ L.T
    eps = special.logit(special.ndtr(z)) if config.residual == "logistic" else z
    x = rng.standard_normal(N)
    sizes = rng.integers(2, M + 1, size=N) if config.dropout else np.full(N, M)

    visit = np.broadcast_to(np.arange(M, dtype=float), (N, M))
    t = visit * config.time_step
    latent = config.beta_x * x[:, None] + config.beta_t * t + eps
    y = _transform(config)[0](to_response(latent))
    keep = visit < sizes[:, None]
    ids = np.broadcast_to(np.arange(N)[:, None], (N, M))[keep]
    xs = np.broadcast_to(x[:, None], (N, M))[keep]
    return ClusteredDataset.from_arrays(ids, visit[keep], y[keep],
                                        np.column_stack([xs, t[keep]]), ("X", "T"))


def _residual(config: SimConfig):
    return stats.logistic if config.residual == "logistic" else stats.norm


@dataclass(frozen=True)
class TrueTargets:
    mean: float
    median: float
    eta: float
    residual: str
    transform: str

    def cdf_at(self, y: float) -> float:
        """``P(Y <= y)`` at the stored linear predictor."""
        if self.transform == "exp":
            if y <= 0:
                return 0.0
            y = math.log(y)
        p = 2.0 * stats.chi2.cdf(y, CHI2_DF)
        if p >= 1.0:
            return 1.0
        if p <= 0.0:
            return 0.0
        dist = stats.logistic if self.residual == "logistic" else stats.norm
        return float(dist.cdf(special.ndtri(p) - self.eta))


def true_targets(config: SimConfig, x: float, t: float) -> TrueTargets:
    """Population mean, median and CDF of ``Y`` at ``X = x, T = t``.

    Raises
    ------
    ConvergenceError
        The adaptive quadrature for the mean did not reach its tolerance.
    """
    eta = config.beta_x * x + config.beta_t * t
    g = _transform(config)[0]
    dist = _residual(config)

    def integrand(e):
        return g(float(to_response(eta + e))) * dist.pdf(e)

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            mean, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=QUAD_TOL, limit=200)
        except integrate.IntegrationWarning as exc:
            raise ConvergenceError(f"quadrature for the conditional mean failed: {exc}") from None
    median = float(g(float(to_response(eta + dist.median()))))
    return TrueTargets(float(mean), median, float(eta), config.residual, config.transform)


# ---------------------------------------------------------------------------
# replicates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Estimand:
    name: str
    truth: float
    target: Optional[TargetSpec] = None


def estimands(config: SimConfig) -> list:
    scale = config.effective_coef_scale
    out = [Estimand("beta_X", scale * config.beta_x), Estimand("beta_T", scale * config.beta_t)]
    for tgt in config.targets:
        tt = true_targets(config, tgt.x, tgt.t)
        truth = {"mean": tt.mean, "median": tt.median}.get(tgt.kind)
        if truth is None:
            truth = tt.cdf_at(tgt.y)
        out.append(Estimand(tgt.label, truth, tgt))
    return out


def _prepare(data: ClusteredDataset, est: EstimatorSpec) -> ClusteredDataset:
    if est.bins is not None:
        return bin_equal_quantile(data, min(est.bins, data.n_obs))
    if est.round is not None:
        return round_responses(data, est.round)
    return data


def fit_estimator(data: ClusteredDataset, est: EstimatorSpec) -> npmle.FitResult:
    data = _prepare(data, est)
    if geecorr.CorrStructure.parse(est.structure) is geecorr.CorrStructure.INDEPENDENCE:
        return npmle.fit_independence(data, link=est.link)
    opts = geecorr.GEEOptions(max_levels=est.max_levels, alpha_criterion=est.alpha_criterion)
    return geecorr.one_step_fit(data, link=est.link, structure=est.structure, options=opts)


def _target_estimate(fit, tgt: TargetSpec, level: float):
    x = [tgt.x, tgt.t]
    if tgt.kind == "mean":
        return conditional.conditional_mean(fit, x, level)
    if tgt.kind == "median":
        return conditional.conditional_quantile(fit, x, 0.5, level)
    return conditional.conditional_cdf(fit, x, tgt.y, level)


_NAN4 = (math.nan, math.nan, math.nan, math.nan)


def run_replicate(config: SimConfig, rep: int, ests=None) -> dict:
    """Fit every estimator on replicate ``rep``.

    Returns, per estimator, either ``None`` (the fit failed) or a dict with
    the ``(estimate, se, ci_low, ci_high)`` rows in estimand order and the
    fitted ``alpha``.
    """
    ests = estimands(config) if ests is None else ests
    rng = np.random.default_rng([config.seed, rep])
    data = generate_dataset(config, rng)
    z = float(special.ndtri(0.5 + 0.5 * config.level))
    out = {}
    for est in config.estimators:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = fit_estimator(data, est)
        except (CPMGEEError, np.linalg.LinAlgError, FloatingPointError):
            out[est.name] = None
            continue
        rows = []
        se = fit.beta_se
        for k in range(2):
            b, s = float(fit.beta[k]), float(se[k])
            rows.append((b, s, b - z * s, b + z * s))
        for e in ests[2:]:
            try:
                c = _target_estimate(fit, e.target, config.level)
            except CPMGEEError:
                rows.append(_NAN4)
                continue
            rows.append((c.value, math.nan if c.se is None else c.se, c.ci_low, c.ci_high))
        out[est.name] = {"rows": np.asarray(rows, dtype=float), "alpha": fit.alpha}
    return out


def _worker(args):
    config, lo, hi = args
    ests = estimands(config)
    return [run_replicate(config, r, ests) for r in range(lo, hi)]


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Characteristic:
    """Operating characteristics of one estimator for one estimand.

    Metrics that are undefined (percent bias at a zero truth, a standard
    deviation from fewer than two replicates, average SE when no SE is
    reported) are ``None``.
    """

    estimator: str
    estimand: str
    truth: float
    n: int
    mean: Optional[float]
    percent_bias: Optional[float]
    rmse: Optional[float]
    empirical_se: Optional[float]
    average_se: Optional[float]
    coverage: Optional[float]
    relative_efficiency: Optional[float]


@dataclass(frozen=True)
class OperatingCharacteristics:
    config: dict
    reference: str
    reps: int
    rows: tuple
    failures: dict
    mean_alpha: dict

    @property
    def failure_fraction(self) -> float:
        return max(self.failures.values()) / self.reps if self.failures else 0.0

    @property
    def degraded(self) -> bool:
        return self.failure_fraction > FAILURE_THRESHOLD

    def get(self, estimator: str, estimand: str) -> Characteristic:
        for row in self.rows:
            if row.estimator == estimator and row.estimand == estimand:
                return row
        raise KeyError((estimator, estimand))

    def to_dict(self) -> dict:
        return {"config": self.config, "reference": self.reference, "reps": self.reps,
                "failures": self.failures, "mean_alpha": self.mean_alpha,
                "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    def table(self) -> str:
        """Plain-text summary: one block per estimator, one column per estimand."""
        labels = list(dict.fromkeys(r.estimand for r in self.rows))
        metrics = [("Percent bias", "percent_bias"), ("RMSE", "rmse"),
                   ("Empirical SE", "empirical_se"), ("Average SE", "average_se"),
                   ("Coverage", "coverage"), ("RE", "relative_efficiency")]
        width = max(12, *(len(s) for s in labels)) + 2
        lines = []
        head = " " * 14 + "".join(s.rjust(width) for s in labels)
        for est in dict.fromkeys(r.estimator for r in self.rows):
            lines.append(f"{est}  (failures: {self.failures.get(est, 0)}/{self.reps})")
            lines.append(head)
            for title, attr in metrics:
                cells = []
                for s in labels:
                    v = getattr(self.get(est, s), attr)
                    cells.append(("-" if v is None else f"{v:.3f}").rjust(width))
                lines.append(title.ljust(14) + "".join(cells))
            lines.append("")
        return "\n".join(lines)


def _none(v):
    return None if v is None or not math.isfinite(v) else float(v)


def summarize(est_name, estimand: Estimand, rows, ref_rows=None) -> Characteristic:
    """Metrics from the ``(estimate, se, ci_low, ci_high)`` rows of one estimand.

    ``ref_rows`` are the reference estimator's rows for the same replicates
    (aligned, NaN where it failed); the relative efficiency uses the
    replicates where both succeeded.
    """
    rows = np.asarray(rows, dtype=float).reshape(-1, 4)
    ok = np.isfinite(rows[:, 0])
    est = rows[ok, 0]
    n = int(est.shape[0])
    truth = float(estimand.truth)
    if n == 0:
        return Characteristic(est_name, estimand.name, truth, 0, *([None] * 7))
    mean = float(est.mean())
    bias = mean - truth
    pbias = 100.0 * bias / truth if truth != 0.0 else None
    rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
    emp = float(np.std(est, ddof=1)) if n >= 2 else None
    ses = rows[ok, 1]
    avg = float(np.mean(ses)) if np.all(np.isfinite(ses)) else None
    lo, hi = rows[ok, 2], rows[ok, 3]
    coverage = float(np.mean((lo <= truth) & (truth <= hi)))
    re = None
    if ref_rows is not None:
        ref = np.asarray(ref_rows, dtype=float).reshape(-1, 4)[:, 0]
        both = ok & np.isfinite(ref)
        if np.count_nonzero(both) >= 2:
            v_ref = np.var(ref[both], ddof=1)
            v_est = np.var(rows[both, 0], ddof=1)
            if v_ref > 0 and v_est > 0:
                re = float(v_ref / v_est)
    return Characteristic(est_name, estimand.name, truth, n, mean, _none(pbias), rmse,
                          _none(emp), _none(avg), coverage, re)


def aggregate(config: SimConfig, results: list, ests=None) -> OperatingCharacteristics:
    ests = estimands(config) if ests is None else ests
    n_est = len(ests)
    table = {}
    failures = {}
    alphas = {}
    for spec in config.estimators:
        per = [r[spec.name] for r in results]
        failures[spec.name] = sum(p is None for p in per)
        table[spec.name] = np.stack([np.full((n_est, 4), np.nan) if p is None else p["rows"]
                                     for p in per])
        a = [p["alpha"] for p in per if p is not None and p["alpha"] is not None]
        alphas[spec.name] = float(np.mean(a)) if a else None
    ref = config.reference_name
    rows = []
    for spec in config.estimators:
        for k, e in enumerate(ests):
            rows.append(summarize(spec.name, e, table[spec.name][:, k], table[ref][:, k]))
    return OperatingCharacteristics(config.to_dict(), ref, config.reps, tuple(rows), failures,
                                    alphas)


def run_study(config: SimConfig, threads: int = 1) -> OperatingCharacteristics:
    """Generate ``config.reps`` datasets, fit every estimator on each, summarise.

    Replicate ``r`` draws from ``default_rng([seed, r])``, so the result does
    not depend on ``threads``.  Failed fits are excluded per estimator and
    counted in ``failures``.
    """
    ests = estimands(config)
    threads = max(1, int(threads))
    if threads == 1 or config.reps == 1:
        results = [run_replicate(config, r, ests) for r in range(config.reps)]
    else:
        edges = np.linspace(0, config.reps, min(config.reps, 4 * threads) + 1).astype(int)
        chunks = [(config, int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = [r for part in pool.map(_worker, chunks) for r in part]
    return aggregate(config, results, ests)


def default_threads() -> int:
    env = os.environ.get("CPMGEE_THREADS")
    if env:
        return max(1, int(env))
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
