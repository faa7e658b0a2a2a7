"""Time the compiled kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``; ``--repeat`` controls the
number of timing rounds and the best round is reported.
"""

import argparse
import timeit

import numpy as np

from cpmgee import kernels, npmle, simulate
from cpmgee.dataset import encode_ordinal


def _tridiagonal(rng, n):
    off = rng.uniform(-1, 1, size=n - 1)
    diag = np.abs(np.concatenate([[0], off])) + np.abs(np.concatenate([off, [0]])) + 1.0
    return diag, off


def _cases(rng):
    diag, off = _tridiagonal(rng, 3000)
    rhs = rng.standard_normal((3000, 4))
    data = simulate.generate_dataset(simulate.SimConfig(n_clusters=500),
                                     np.random.default_rng(0))
    enc = encode_ordinal(data)
    theta = npmle.initial_theta(enc, data.n_covariates, "logit")
    eta = data.covariates @ np.array([1.0, 1.0])

    def factor(mod):
        return lambda: mod.tridiag_factor(diag, off)

    def solve(mod):
        d, l = mod.tridiag_factor(diag, off)
        return lambda: mod.tridiag_solve(d, l, rhs)

    def information(mod):
        return lambda: mod.expected_information(theta.gamma, eta, data.covariates, 0)

    return [("tridiag_factor n=3000", factor), ("tridiag_solve n=3000, 4 rhs", solve),
            (f"expected_information J={enc.n_levels}, N={data.n_obs}", information)]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    impls = [("python", kernels.python)]
    if kernels.compiled is not None:
        impls.append(("compiled", kernels.compiled))
    else:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(1)
    print(f"{'kernel':<42}" + "".join(f"{name:>12}" for name, _ in impls) + f"{'speedup':>10}")
    for label, make in _cases(rng):
        best = []
        for _, mod in impls:
            fn = make(mod)
            n, _ = timeit.Timer(fn).autorange()
            best.append(min(timeit.repeat(fn, number=n, repeat=args.repeat)) / n)
        row = f"{label:<42}" + "".join(f"{t * 1e3:>10.3f}ms" for t in best)
        if len(best) == 2:
            row += f"{best[0] / best[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
