import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmgee import npmle
from cpmgee.dataset import ClusteredDataset, OrdinalEncoding, encode_ordinal
from cpmgee.errors import ConvergenceError, ParameterError, RankDeficientError
from cpmgee.linkfun import link_eval

import oracles
from conftest import LINKS, make_instance


def _flat(y, X=None):
    n = len(y)
    return ClusteredDataset.from_arrays(np.arange(n), np.zeros(n), y, X)


class TestTheta:
    def test_monotone_flag(self):
        assert npmle.Theta(np.array([-1.0, 0.0, 2.0]), np.zeros(1)).is_monotone()
        assert not npmle.Theta(np.array([0.0, 0.0]), np.zeros(1)).is_monotone()
        assert not npmle.Theta(np.array([1.0, np.nan]), np.zeros(1)).is_monotone()
        with pytest.raises(ParameterError):
            npmle.check_monotone([1.0, 0.0])

    def test_read_only(self):
        th = npmle.Theta(np.array([0.0, 1.0]), np.array([0.5]))
        with pytest.raises(ValueError):
            th.gamma[0] = 3.0

    def test_vector_round_trip(self):
        th = npmle.Theta(np.array([-1.0, 0.5, 2.0]), np.array([0.1, -0.2]))
        back = npmle.Theta.from_vector(th.vector, 3)
        np.testing.assert_array_equal(back.gamma, th.gamma)
        np.testing.assert_array_equal(back.beta, th.beta)


class TestLikelihood:
    def test_single_observation(self):
        data = ClusteredDataset.from_arrays([0, 1], [0, 0], [1.0, 2.0])
        enc = encode_ordinal(data)
        th = npmle.Theta(np.array([0.0]), np.zeros(0))
        np.testing.assert_allclose(npmle.log_pseudo_likelihood(th, data, enc, "logit"),
                                   2 * np.log(0.5), rtol=1e-15)

    @pytest.mark.parametrize("link", LINKS)
    def test_saturated_multinomial(self, rng, link):
        data, enc = make_instance(rng, n_clusters=15, n_levels=5, p=2)
        counts = np.bincount(enc.rank)[1:]
        direct = float(np.sum(counts * np.log(counts / counts.sum())))
        th = npmle.initial_theta(enc, 2, link)
        np.testing.assert_allclose(npmle.log_pseudo_likelihood(th, data, enc, link), direct,
                                   rtol=1e-12)

    def test_permutation_invariant(self, rng):
        data, enc = make_instance(rng, n_clusters=10, n_levels=4, p=2)
        th = npmle.Theta(npmle.initial_theta(enc, 2, "logit").gamma, np.array([0.3, -0.2]))
        perm = rng.permutation(data.n_obs)
        shuffled = ClusteredDataset.from_arrays(np.arange(data.n_obs), np.zeros(data.n_obs),
                                                data.response[perm], data.covariates[perm])
        a = npmle.log_pseudo_likelihood(th, data, enc, "logit")
        b = npmle.log_pseudo_likelihood(th, shuffled, encode_ordinal(shuffled), "logit")
        np.testing.assert_allclose(a, b, rtol=1e-13)

    @pytest.mark.parametrize("link", LINKS)
    def test_matches_oracle(self, rng, link):
        data, enc = make_instance(rng, n_clusters=10, n_levels=5, p=2)
        th = npmle.Theta(npmle.initial_theta(enc, 2, link).gamma, np.array([0.4, -0.7]))
        m = th.n_gamma
        want = float(oracles.mp_loglik(th.vector, enc.rank, data.covariates, m, link))
        np.testing.assert_allclose(npmle.log_pseudo_likelihood(th, data, enc, link), want,
                                   rtol=1e-13)

    def test_non_monotone_rejected(self, rng):
        data, enc = make_instance(rng, n_levels=3, p=1)
        bad = npmle.Theta(np.array([1.0, 0.0]), np.zeros(1))
        with pytest.raises(ParameterError):
            npmle.log_pseudo_likelihood(bad, data, enc, "logit")


@pytest.mark.parametrize("link", LINKS)
class TestDerivatives:
    def test_score_against_oracle(self, rng, link):
        data, enc = make_instance(rng, n_clusters=12, n_levels=6, p=2)
        th = npmle.Theta(npmle.initial_theta(enc, 2, link).gamma + 0.1, np.array([0.5, -0.3]))
        grad, terms = npmle.score(th, data, enc, link)
        want = oracles.mp_gradient(th.vector, enc.rank, data.covariates, th.n_gamma, link)
        np.testing.assert_allclose(grad, want, rtol=1e-9, atol=1e-11)
        np.testing.assert_allclose(terms.dense().sum(axis=0), grad, rtol=1e-12, atol=1e-13)

    def test_hessian_against_oracle(self, rng, link):
        data, enc = make_instance(rng, n_clusters=10, n_levels=5, p=2)
        th = npmle.Theta(npmle.initial_theta(enc, 2, link).gamma, np.array([0.2, 0.6]))
        H = npmle.hessian(th, data, enc, link).to_dense()
        want = oracles.mp_hessian(th.vector, enc.rank, data.covariates, th.n_gamma, link)
        np.testing.assert_allclose(H, want, rtol=1e-6, atol=1e-8)

    def test_tridiagonal_structure(self, rng, link):
        data, enc = make_instance(rng, n_clusters=12, n_levels=6, p=1)
        th = npmle.initial_theta(enc, 1, link)
        H = npmle.hessian(th, data, enc, link).to_dense()
        m = th.n_gamma
        band = np.abs(np.subtract.outer(np.arange(m), np.arange(m))) > 1
        assert np.all(H[:m, :m][band] == 0.0)
        assert H[0, 2] == 0.0

    def test_terms_sparsity(self, rng, link):
        data, enc = make_instance(rng, n_clusters=12, n_levels=6, p=2)
        th = npmle.initial_theta(enc, 2, link)
        _, terms = npmle.score(th, data, enc, link)
        G = terms.dense()[:, :th.n_gamma]
        assert np.all(np.count_nonzero(G, axis=1) <= 2)

    def test_expected_information_is_mean_of_observed(self, rng, link):
        # averaging the observed information over draws of the response from the
        # model reproduces the expected information
        data, enc = make_instance(rng, n_clusters=6, max_size=2, n_levels=4, p=1)
        th = npmle.Theta(npmle.initial_theta(enc, 1, link).gamma, np.array([0.4]))
        m = th.n_gamma
        X = data.covariates
        dist = oracles._SCIPY[link]
        g = np.concatenate([[-np.inf], th.gamma, [np.inf]])
        P = np.diff(dist.cdf(g[None, :] - (X @ th.beta)[:, None]), axis=1)
        want = np.zeros((m + 1, m + 1))
        for k in range(data.n_obs):
            for j in range(m + 1):
                one = ClusteredDataset.from_arrays([0], [0.0], [0.0], X[[k]])
                e1 = OrdinalEncoding(enc.levels, np.array([j + 1]))
                want += P[k, j] * -npmle.hessian(th, one, e1, link).to_dense()
        got = npmle.expected_information(th, data, enc, link).to_dense()
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


class TestFit:
    @pytest.mark.parametrize("link", LINKS)
    def test_intercept_only_closed_form(self, rng, link):
        y = np.round(rng.standard_normal(20), 1)
        data = _flat(y)
        fit = npmle.fit_independence(data, link=link)
        cum = np.array([np.mean(y <= v) for v in fit.levels[:-1]])
        np.testing.assert_allclose(fit.gamma, link_eval(link, cum), atol=1e-8)
        m = fit.theta.n_gamma
        enc = encode_ordinal(data)
        bf = oracles.brute_force_fit(enc.rank, np.zeros((20, 0)), m, link)
        np.testing.assert_allclose(fit.theta.vector, bf, atol=1e-6)

    def test_two_by_two_log_odds_ratio(self):
        # binary covariate, binary response: the slope is the sample log odds ratio
        x = np.array([0] * 30 + [1] * 30, dtype=float)
        y = np.array([0] * 18 + [1] * 12 + [0] * 9 + [1] * 21, dtype=float)
        fit = npmle.fit_independence(_flat(y, x), options=npmle.FitOptions(tol=1e-13))
        a, b, c, d = 18, 12, 9, 21  # P(Y<=0|x) decreases with x, so beta > 0
        np.testing.assert_allclose(fit.beta[0], np.log((a * d) / (b * c)), rtol=1e-10)

    @pytest.mark.parametrize("link", LINKS)
    def test_monotone_transform_invariance(self, rng, link):
        data, enc = make_instance(rng, n_clusters=25, n_levels=12, p=2)
        fit = npmle.fit_independence(data, link=link)
        refit = npmle.fit_independence(data.with_response(np.exp(data.response) ** 3), link=link)
        np.testing.assert_allclose(refit.beta, fit.beta, atol=1e-10)
        np.testing.assert_allclose(refit.gamma, fit.gamma, atol=1e-10)

    @pytest.mark.parametrize("link", LINKS)
    def test_converged_fit_contract(self, rng, link):
        data, enc = make_instance(rng, n_clusters=30, n_levels=10, p=2)
        fit = npmle.fit_independence(data, enc, link=link)
        grad, _ = npmle.score(fit.theta, data, enc, link)
        assert fit.converged
        assert np.max(np.abs(grad)) < 1e-8
        assert fit.theta.is_monotone()
        for V in (fit.model_cov, fit.robust_cov):
            np.testing.assert_allclose(V, V.T, atol=1e-14)
            assert np.linalg.eigvalsh(V).min() > -1e-8 * np.trace(V)
        H = -npmle.hessian(fit.theta, data, enc, link).to_dense()
        assert np.all(np.linalg.eigvalsh(H) > 0)
        np.testing.assert_allclose(fit.model_cov, np.linalg.inv(H), rtol=1e-8, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_brute_force_tiny(self, seed):
        rng = np.random.default_rng(100 + seed)
        data, enc = make_instance(rng, n_clusters=6, max_size=2, n_levels=4, p=2)
        fit = npmle.fit_independence(data, enc, link=LINKS[seed])
        bf = oracles.brute_force_fit(enc.rank, data.covariates, fit.theta.n_gamma, LINKS[seed],
                                     start=fit.theta.vector + 0.3)
        np.testing.assert_allclose(fit.theta.vector, bf, atol=1e-4)

    def test_rank_deficient(self, rng):
        x = rng.standard_normal(20)
        with pytest.raises(RankDeficientError):
            npmle.fit_independence(_flat(rng.standard_normal(20), np.column_stack([x, 2 * x])))
        with pytest.raises(RankDeficientError):
            npmle.fit_independence(_flat(rng.standard_normal(20), np.ones(20)))

    def test_max_iter_partial(self, rng):
        data, _ = make_instance(rng, n_clusters=20, n_levels=8, p=2, beta_scale=2.0)
        with pytest.raises(ConvergenceError) as err:
            npmle.fit_independence(data, options=npmle.FitOptions(max_iter=1))
        partial = err.value.partial
        assert partial is not None and not partial.converged
        assert partial.theta.is_monotone()

    def test_separation_warning(self):
        x = np.arange(10.0)
        y = (x > 4.5).astype(float)
        with pytest.warns(npmle.SeparationWarning):
            try:
                npmle.fit_independence(_flat(y, x))
            except ConvergenceError:
                pass

    def test_observed_bread_option(self, rng):
        data, _ = make_instance(rng, n_clusters=40, n_levels=6, p=1)
        a = npmle.fit_independence(data)
        b = npmle.fit_independence(data, options=npmle.FitOptions(bread="observed"))
        np.testing.assert_array_equal(a.theta.vector, b.theta.vector)
        # same order of magnitude, not identical
        ratio = np.diag(b.robust_cov) / np.diag(a.robust_cov)
        assert np.all((ratio > 0.5) & (ratio < 2.0))


class TestSandwich:
    def test_size_one_clusters_match_observation_wise(self, rng):
        y = np.round(rng.standard_normal(30), 0)
        X = rng.standard_normal((30, 2))
        data = _flat(y, X)
        enc = encode_ordinal(data)
        fit = npmle.fit_independence(data, enc)
        m = fit.theta.n_gamma
        # per-observation gradients from the independent oracle
        G = np.array([oracles.mp_gradient(fit.theta.vector, enc.rank[[k]], X[[k]], m, "logit")
                      for k in range(30)])
        A = npmle.expected_information(fit.theta, data, enc, "logit").to_dense()
        Ai = np.linalg.inv(A)
        np.testing.assert_allclose(fit.robust_cov, Ai @ G.T @ G @ Ai, rtol=1e-7, atol=1e-12)

    def test_duplicating_clusters_halves(self, rng):
        data, enc = make_instance(rng, n_clusters=10, max_size=3, n_levels=5, p=2)
        fit = npmle.fit_independence(data, enc)
        ids = np.concatenate([data.cluster_id.astype(str), np.char.add(data.cluster_id.astype(str), "b")])
        dup = ClusteredDataset.from_arrays(ids, np.tile(data.time, 2), np.tile(data.response, 2),
                                           np.tile(data.covariates, (2, 1)))
        fit2 = npmle.fit_independence(dup)
        np.testing.assert_allclose(fit2.theta.vector, fit.theta.vector, atol=1e-8)
        np.testing.assert_allclose(fit2.robust_cov, fit.robust_cov / 2, rtol=1e-6, atol=1e-12)

    def test_grouping_matters(self, rng):
        data, enc = make_instance(rng, n_clusters=12, max_size=3, n_levels=5, p=1)
        fit = npmle.fit_independence(data, enc)
        _, terms = npmle.score(fit.theta, data, enc, "logit")
        U = terms.dense()
        A = npmle.expected_information(fit.theta, data, enc, "logit")
        ungrouped = npmle.sandwich_covariance(A, U)
        grouped = npmle.sandwich_covariance(A, terms.cluster_sums(data.cluster_codes,
                                                                  data.n_clusters))
        np.testing.assert_allclose(grouped, fit.robust_cov, rtol=1e-12)
        assert not np.allclose(grouped, ungrouped)

    @pytest.mark.slow
    def test_model_and_robust_agree_under_independence(self):
        rng = np.random.default_rng(2024)
        model, robust = [], []
        for _ in range(200):
            x = rng.standard_normal(150)
            y = 0.8 * x + rng.logistic(size=150)
            fit = npmle.fit_independence(_flat(y, x))
            model.append(fit.model_cov[-1, -1])
            robust.append(fit.robust_cov[-1, -1])
        ratio = np.mean(robust) / np.mean(model)
        assert 0.9 <= ratio <= 1.1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), link=st.sampled_from(LINKS))
def test_newton_never_decreases_likelihood(seed, link):
    rng = np.random.default_rng(seed)
    data, enc = make_instance(rng, n_clusters=10, max_size=2, n_levels=5, p=1)
    lls = []
    for it in range(1, 6):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                fit = npmle.fit_independence(data, enc, link,
                                             npmle.FitOptions(max_iter=it))
            except ConvergenceError as exc:
                fit = exc.partial
        lls.append(fit.loglik)
    assert np.all(np.diff(lls) >= -1e-12)
