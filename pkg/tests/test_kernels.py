import os
import subprocess
import sys

import numpy as np
import pytest

from cpmgee import kernels, npmle
from cpmgee._linalg import BorderedTridiagonal
from cpmgee.dataset import ClusteredDataset, OrdinalEncoding
from cpmgee.linkfun import LinkFamily

requires_compiled = pytest.mark.skipif(kernels.compiled is None,
                                       reason="compiled extension not built")


def _spd_tridiagonal(rng, n):
    off = rng.uniform(-1, 1, size=n - 1)
    diag = np.abs(np.concatenate([[0], off])) + np.abs(np.concatenate([off, [0]])) \
        + rng.uniform(0.1, 2, size=n)
    return diag, off


def _dense(diag, off):
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


@pytest.mark.parametrize("impl", ["python", "compiled"])
class TestTridiagonal:
    def _mod(self, impl):
        mod = getattr(kernels, impl)
        if mod is None:
            pytest.skip("compiled extension not built")
        return mod

    def test_solve_against_dense(self, rng, impl):
        mod = self._mod(impl)
        for n in (1, 2, 7, 50):
            diag, off = _spd_tridiagonal(rng, n)
            d, l = mod.tridiag_factor(diag, off)
            b = rng.standard_normal(n)
            np.testing.assert_allclose(mod.tridiag_solve(d, l, b),
                                       np.linalg.solve(_dense(diag, off), b), rtol=1e-10,
                                       atol=1e-12)
            B = rng.standard_normal((n, 3))
            np.testing.assert_allclose(mod.tridiag_solve(d, l, B),
                                       np.linalg.solve(_dense(diag, off), B), rtol=1e-10,
                                       atol=1e-12)

    def test_not_positive_definite(self, impl):
        mod = self._mod(impl)
        with pytest.raises(np.linalg.LinAlgError):
            mod.tridiag_factor(np.array([1.0, 1.0]), np.array([2.0]))


@requires_compiled
class TestParity:
    @pytest.mark.parametrize("link", list(LinkFamily))
    def test_expected_information(self, rng, link):
        m, n, p = 9, 40, 3
        gamma = np.cumsum(rng.uniform(0.1, 1.0, size=m)) - 2.0
        X = rng.standard_normal((n, p))
        eta = X @ rng.standard_normal(p)
        a = kernels.python.expected_information(gamma, eta, X, link.code)
        b = kernels.compiled.expected_information(gamma, eta, X, link.code)
        for u, v in zip(a, b):
            np.testing.assert_allclose(v, u, rtol=1e-12, atol=1e-14)

    def test_no_covariates(self, rng):
        gamma = np.array([-1.0, 0.5])
        eta = np.zeros(5)
        X = np.zeros((5, 0))
        a = kernels.python.expected_information(gamma, eta, X, 0)
        b = kernels.compiled.expected_information(gamma, eta, X, 0)
        for u, v in zip(a, b):
            np.testing.assert_allclose(v, u, rtol=1e-13)

    def test_factorisation(self, rng):
        diag, off = _spd_tridiagonal(rng, 200)
        for u, v in zip(kernels.python.tridiag_factor(diag, off),
                        kernels.compiled.tridiag_factor(diag, off)):
            np.testing.assert_allclose(v, u, rtol=1e-14)


def test_information_matches_opg_expectation():
    # one observation, enumerated over its levels: E[score score'] is the information
    gamma = np.array([-0.7, 0.1, 1.2])
    x = np.array([[0.4, -1.0]])
    beta = np.array([0.3, 0.8])
    theta = npmle.Theta(gamma, beta)
    data = ClusteredDataset.from_arrays([0], [0.0], [0.0], x)
    levels = np.arange(4.0)
    want = np.zeros((5, 5))
    F = np.concatenate([[0], 1 / (1 + np.exp(-(gamma - x @ beta))), [1]])
    for j in range(4):
        g, _ = npmle.score(theta, data, OrdinalEncoding(levels, np.array([j + 1])), "logit")
        want += (F[j + 1] - F[j]) * np.outer(g, g)
    got = BorderedTridiagonal(*kernels.expected_information(gamma, x @ beta, x, 0)).to_dense()
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


def test_pure_python_switch():
    env = dict(os.environ, CPMGEE_PURE_PYTHON="1")
    res = subprocess.run([sys.executable, "-c", "import cpmgee; print(cpmgee.BACKEND)"],
                         capture_output=True, text=True, env=env)
    assert res.stdout.strip() == "python"
