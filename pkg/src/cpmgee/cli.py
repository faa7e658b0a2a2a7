"""Command-line interface: ``cpmgee {fit,predict,simulate,bin}``.

Every file written gets a sidecar ``<file>.manifest.json`` recording the
command, resolved options, SHA-256 digests of the inputs, the tool version,
wall time and any warnings.

Exit codes: 0 success, 1 input or validation error, 2 non-convergence,
3 degraded simulation (more than 10% failed fits for some estimator).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, conditional, geecorr, npmle, simulate
from .dataset import (ColumnMapping, OrdinalEncoding, bin_equal_quantile, encode_ordinal,
                      load_csv, round_responses, write_csv)
from .errors import ConvergenceError, CPMGEEError, DimensionError, ParseError
from .linkfun import LinkFamily

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_DEGRADED = 0, 1, 2, 3
FIT_FORMAT = "cpmgee-fit/1"


def _finite(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, command, options, inputs, wall_time, notes) -> None:
    manifest = {
        "command": command,
        "options": options,
        "input_digest": {str(p): digest(p) for p in inputs},
        "version": __version__,
        "wall_time": wall_time,
        "warnings": list(notes),
    }
    Path(str(out_path) + ".manifest.json").write_text(_dumps(manifest))


# ---------------------------------------------------------------------------
# fit JSON
# ---------------------------------------------------------------------------

def fit_to_dict(fit: npmle.FitResult) -> dict:
    return {
        "format": FIT_FORMAT,
        "link": fit.link.value,
        "structure": fit.structure,
        "covariate_names": list(fit.covariate_names),
        "levels": fit.levels.tolist(),
        "gamma": fit.gamma.tolist(),
        "beta": fit.beta.tolist(),
        "model_cov": np.asarray(fit.model_cov).tolist(),
        "robust_cov": np.asarray(fit.robust_cov).tolist(),
        "alpha": _finite(fit.alpha),
        "alpha_objective": _finite(fit.alpha_objective),
        "outer_iterations": fit.outer_iterations,
        "loglik": _finite(fit.loglik),
        "convergence": {"converged": bool(fit.converged), "iterations": int(fit.iterations),
                        "score_norm": _finite(fit.score_norm)},
        "n_obs": fit.n_obs,
        "n_clusters": fit.n_clusters,
        "warnings": list(fit.warnings),
    }


def _matrix(rows, n):
    a = np.array(rows, dtype=float) if rows else np.zeros((0, 0))
    return a.reshape(n, n)


def fit_from_dict(payload: dict) -> npmle.FitResult:
    """Rebuild a :class:`FitResult` (without per-observation ranks) from fit JSON."""
    if payload.get("format") != FIT_FORMAT:
        raise ParseError(f"not a fit file (format {payload.get('format')!r})")
    try:
        gamma = np.array(payload["gamma"], dtype=float)
        beta = np.array(payload["beta"], dtype=float)
        n = gamma.shape[0] + beta.shape[0]
        conv = payload["convergence"]
        nan = float("nan")
        return npmle.FitResult(
            theta=npmle.Theta(gamma, beta),
            model_cov=_matrix(payload["model_cov"], n),
            robust_cov=_matrix(payload["robust_cov"], n),
            alpha=payload["alpha"],
            structure=payload["structure"],
            loglik=nan if payload["loglik"] is None else payload["loglik"],
            iterations=conv["iterations"],
            converged=conv["converged"],
            encoding=OrdinalEncoding(np.array(payload["levels"], dtype=float),
                                     np.zeros(0, dtype=np.int64)),
            link=LinkFamily.parse(payload["link"]),
            covariate_names=tuple(payload["covariate_names"]),
            score_norm=nan if conv["score_norm"] is None else conv["score_norm"],
            alpha_objective=payload["alpha_objective"],
            outer_iterations=payload["outer_iterations"],
            n_obs=payload["n_obs"],
            n_clusters=payload["n_clusters"],
            warnings=tuple(payload["warnings"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed fit file: {exc}") from None


def load_fit(path) -> npmle.FitResult:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from None
    return fit_from_dict(payload)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _columns(args, header_path) -> ColumnMapping:
    if args.covariates is not None:
        covs = tuple(c.strip() for c in args.covariates.split(",") if c.strip())
    else:
        with open(header_path, newline="") as fh:
            first = fh.readline()
        header = [h.strip() for h in first.strip().split(",")]
        used = {args.id_col, args.time_col, args.response_col}
        covs = tuple(h for h in header if h and h not in used)
    return ColumnMapping(args.id_col, args.time_col, args.response_col, covs)


def _coarsen(data, args):
    if args.bins is not None:
        return bin_equal_quantile(data, args.bins)
    if args.round is not None:
        return round_responses(data, args.round)
    return data


def cmd_fit(args) -> int:
    cols = _columns(args, args.input)
    data = _coarsen(load_csv(args.input, cols), args)
    enc = encode_ordinal(data)
    structure = geecorr.CorrStructure.parse(args.corstr)
    status = EXIT_OK
    try:
        if structure is geecorr.CorrStructure.INDEPENDENCE:
            fit = npmle.fit_independence(data, enc, link=args.link)
        else:
            opts = geecorr.GEEOptions(max_levels=args.max_levels, alpha_fixed=args.alpha_fixed,
                                      outer_iters=args.outer_iters,
                                      alpha_criterion=args.alpha_criterion)
            fit = geecorr.one_step_fit(data, enc, link=args.link, structure=structure,
                                       options=opts)
    except ConvergenceError as exc:
        if exc.partial is None:
            raise
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        fit, status = exc.partial, EXIT_CONVERGENCE
    Path(args.out).write_text(_dumps(fit_to_dict(fit)))
    args.written.append(args.out)
    return status


class _Request(argparse.Action):
    """Collect prediction requests in command-line order."""

    def __call__(self, parser, namespace, values, option_string=None):
        reqs = getattr(namespace, "requests", None) or []
        reqs.append((self.const, values))
        namespace.requests = reqs


def parse_at(spec: str, names) -> np.ndarray:
    """Parse ``"X=1,T=0.2"`` into a covariate vector ordered like ``names``."""
    pairs = {}
    for part in filter(None, (s.strip() for s in spec.split(","))) if spec else ():
        key, sep, val = part.partition("=")
        if not sep:
            raise DimensionError(f"malformed covariate assignment {part!r}; expected NAME=VALUE")
        try:
            pairs[key.strip()] = float(val)
        except ValueError:
            raise DimensionError(f"non-numeric value for {key.strip()!r}: {val!r}") from None
    if len(pairs) != len(names):
        raise DimensionError(f"--at gives {len(pairs)} covariate(s); the fit has {len(names)} "
                             f"({', '.join(names)})")
    unknown = sorted(set(pairs) - set(names))
    if unknown:
        raise DimensionError(f"unknown covariate(s) {', '.join(unknown)}; the fit has "
                             f"{', '.join(names)}")
    return np.array([pairs[n] for n in names], dtype=float)


def predict(fit, x, requests, level):
    out = []
    for kind, value in requests:
        if kind == "cdf":
            out.append(conditional.conditional_cdf(fit, x, value, level))
        elif kind == "exceedance":
            out.append(conditional.exceedance_prob(fit, x, value, level))
        elif kind == "quantile":
            out.append(conditional.conditional_quantile(fit, x, value, level))
        else:
            out.append(conditional.conditional_mean(fit, x, level))
    return out


def cmd_predict(args) -> int:
    fit = load_fit(args.fit)
    x = parse_at(args.at, fit.covariate_names)
    requests = args.requests or []
    if not requests:
        raise DimensionError("nothing to predict; pass --cdf, --exceed, --quantile or --mean")
    records = [e.to_dict() for e in predict(fit, x, requests, args.level)]
    text = _dumps(records)
    if args.out:
        Path(args.out).write_text(text)
        args.written.append(args.out)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    with open(args.config) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.config}: invalid JSON: {exc}") from None
    if isinstance(payload, dict):
        payload = {**payload, "seed": args.seed}
    config = simulate.SimConfig.from_dict(payload)
    oc = simulate.run_study(config, threads=args.threads)
    Path(args.out).write_text(oc.to_json())
    table = args.table or str(Path(args.out).with_suffix(".txt"))
    Path(table).write_text(oc.table() + "\n")
    args.written.extend([args.out, table])
    if any(oc.failures.values()):
        warnings.warn(f"failed fits per estimator: {oc.failures}", stacklevel=1)
    return EXIT_DEGRADED if oc.degraded else EXIT_OK


def cmd_bin(args) -> int:
    cols = _columns(args, args.input)
    data = _coarsen(load_csv(args.input, cols), args)
    write_csv(data, args.out, cols)
    args.written.append(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def _add_columns(p):
    p.add_argument("--input", required=True, help="input CSV with a header row")
    p.add_argument("--id-col", default="id")
    p.add_argument("--time-col", default="time")
    p.add_argument("--response-col", default="y")
    p.add_argument("--covariate-cols", "--covariates", dest="covariates", default=None,
                   help="comma-separated covariate columns (default: all other columns)")


def _add_coarsening(p, required=False):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--bins", type=int, default=None, help="equal-quantile bins")
    g.add_argument("--round", type=int, default=None, help="round responses to d decimals")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the input-error code, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpmgee", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: $CPMGEE_THREADS or available cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a cumulative probability model")
    _add_columns(p)
    p.add_argument("--link", choices=[f.value for f in LinkFamily], default="logit")
    p.add_argument("--corstr", choices=[c.value for c in geecorr.CorrStructure],
                   default="independence")
    _add_coarsening(p)
    p.add_argument("--alpha-fixed", type=float, default=None)
    p.add_argument("--outer-iters", type=int, default=1)
    p.add_argument("--max-levels", type=int, default=geecorr.DEFAULT_MAX_LEVELS)
    p.add_argument("--alpha-criterion", choices=["beta", "theta"], default="beta")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="conditional CDF, mean and quantiles from a fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--at", default="", help='covariate values, e.g. "X=1,T=0.2"')
    p.add_argument("--cdf", type=float, action=_Request, const="cdf", metavar="Y")
    p.add_argument("--exceed", type=float, action=_Request, const="exceedance", metavar="Y")
    p.add_argument("--quantile", type=float, action=_Request, const="quantile", metavar="TAU")
    p.add_argument("--mean", nargs=0, action=_Request, const="mean")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", default=None, help="output JSON (default: stdout)")
    p.set_defaults(func=cmd_predict, requests=None)

    p = sub.add_parser("simulate", help="run a Monte-Carlo study")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--table", default=None, help="text table path (default: <out>.txt)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bin", help="coarsen the response column of a CSV")
    _add_columns(p)
    _add_coarsening(p, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bin)
    return parser


def _resolve_threads(value) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("CPMGEE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ParseError(f"CPMGEE_THREADS must be an integer, got {env!r}") from None
    return simulate.default_threads()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.written = []
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            args.threads = _resolve_threads(args.threads)
            status = args.func(args)
        except FileNotFoundError as exc:
            print(f"error: no such file: {exc.filename}", file=sys.stderr)
            return EXIT_INPUT
        except ConvergenceError as exc:
            print(f"error {exc.code}: {exc}", file=sys.stderr)
            return EXIT_CONVERGENCE
        except (CPMGEEError, OSError) as exc:
            code = getattr(exc, "code", "E000")
            print(f"error {code}: {exc}", file=sys.stderr)
            return EXIT_INPUT
    notes = [str(w.message) for w in caught]
    for note in notes:
        print(f"warning: {note}", file=sys.stderr)
    options = {k: v for k, v in sorted(vars(args).items())
               if k not in ("func", "written") and not callable(v)}
    if "requests" in options:
        options["requests"] = [list(r) for r in options["requests"] or []]
    inputs = [getattr(args, k) for k in ("input", "fit", "config") if getattr(args, k, None)]
    wall = time.perf_counter() - start
    for path in args.written:
        write_manifest(path, args.command, options, inputs, wall, notes)
    return status


if __name__ == "__main__":
    sys.exit(main())
