"""Command-line interface.

Exit status: 0 success, 1 I/O failure, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys

import numpy as np

from . import __version__
from .estimator import DegenerateTraceError, SingularFactorError, fit, sample_covariance, sample_covariance_known_mean
from .inference import LinearRestriction, linear_restriction_test, lm_test, wald_test
from .simulation import ConfigError, load_config, run_study
from .tensorlin import FactorShape

EXIT_OK, EXIT_IO, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


def read_matrix_csv(path: str) -> np.ndarray:
    """Read a numeric CSV; a first row that does not parse as numbers is a header."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}", EXIT_IO) from None
    if not rows:
        raise CliError(f"{path}: no data rows", EXIT_INPUT)

    def parse(row):
        return [float(c) for c in row]

    start = 0
    try:
        parse(rows[0])
    except ValueError:
        start = 1
    out = []
    for k in range(start, len(rows)):
        try:
            out.append(parse(rows[k]))
        except ValueError as exc:
            raise CliError(f"{path}: line {k + 1}: {exc}", EXIT_INPUT) from None
    if not out:
        raise CliError(f"{path}: no data rows", EXIT_INPUT)
    widths = {len(r) for r in out}
    if len(widths) != 1:
        raise CliError(f"{path}: rows have differing lengths {sorted(widths)}", EXIT_INPUT)
    arr = np.array(out, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise CliError(f"{path}: non-finite values", EXIT_INPUT)
    return arr


def read_vector(path: str) -> np.ndarray:
    return read_matrix_csv(path).reshape(-1)


def _shape_for(spec: str, n: int) -> FactorShape:
    try:
        shape = FactorShape.parse(spec)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    if shape.n != n:
        raise CliError(f"shape {shape} has product {shape.n} != {n} data columns", EXIT_INPUT)
    return shape


def _mu0(args, n: int) -> np.ndarray:
    if args.mu0_zero:
        return np.zeros(n)
    mu = read_vector(args.mu0)
    if mu.shape[0] != n:
        raise CliError(f"mu0 has length {mu.shape[0]}, data has {n} columns", EXIT_INPUT)
    return mu


def cmd_estimate(args) -> int:
    Y = read_matrix_csv(args.data)
    shape = _shape_for(args.shape, Y.shape[1])
    if args.mean == "estimated":
        if Y.shape[0] < 2:
            raise CliError("need at least 2 rows to estimate the mean", EXIT_INPUT)
        M = sample_covariance(Y)
    elif args.mean == "zero":
        M = sample_covariance_known_mean(Y, np.zeros(Y.shape[1]))
    else:
        if not args.mu:
            raise CliError("--mean file requires --mu", EXIT_INPUT)
        mu = read_vector(args.mu)
        if mu.shape[0] != Y.shape[1]:
            raise CliError(f"mean vector has length {mu.shape[0]}, data has {Y.shape[1]} columns", EXIT_INPUT)
        M = sample_covariance_known_mean(Y, mu)
    try:
        est = fit(M, shape, check_psd=False)
    except DegenerateTraceError as exc:
        raise CliError(f"degenerate input: {exc}", EXIT_INPUT) from None
    text = est.to_json()
    summary = sys.stdout
    if args.out:
        try:
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc.strerror or exc}", EXIT_IO) from None
    else:
        # keep stdout parseable as JSON
        print(text)
        summary = sys.stderr
    print(f"sigma2 = {est.sigma2:.10g}", file=summary)
    for j, F in enumerate(est.factors, start=1):
        print(f"factor {j} ({F.shape[0]}x{F.shape[0]}): trace = {np.trace(F):.10g}", file=summary)
    return EXIT_OK


def cmd_test_mean(args) -> int:
    Y = read_matrix_csv(args.data)
    shape = _shape_for(args.shape, Y.shape[1])
    mu0 = _mu0(args, Y.shape[1])
    if args.stat in ("wald", "both") and Y.shape[0] < 2:
        raise CliError("the Wald test needs at least 2 rows", EXIT_INPUT)
    tests = {"lm": [lm_test], "wald": [wald_test], "both": [lm_test, wald_test]}[args.stat]
    try:
        for test in tests:
            res = test(Y, mu0, shape, alpha=args.alpha, two_sided=args.two_sided)
            print(res.to_json())
    except DegenerateTraceError as exc:
        raise CliError(f"degenerate input: {exc}", EXIT_INPUT) from None
    return EXIT_OK


def cmd_test_linear(args) -> int:
    Y = read_matrix_csv(args.data)
    shape = _shape_for(args.shape, Y.shape[1])
    R = read_matrix_csv(args.R)
    r = read_vector(args.r) if args.r else np.zeros(R.shape[0])
    try:
        restr = LinearRestriction(R, r)
    except ValueError as exc:
        raise CliError(f"invalid restriction: {exc}", EXIT_INPUT) from None
    if args.normalize:
        restr = restr.normalized()
    try:
        res = linear_restriction_test(Y, restr, shape)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    except DegenerateTraceError as exc:
        raise CliError(f"degenerate input: {exc}", EXIT_INPUT) from None
    out = res.to_dict()
    if args.alpha is not None:
        out.update(alpha=args.alpha, reject=bool(res.p_value < args.alpha))
    print(json.dumps(out))
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        config = load_config(args.config)
    except OSError as exc:
        raise CliError(f"cannot read {args.config}: {exc.strerror or exc}", EXIT_IO) from None
    except (ConfigError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}", EXIT_INPUT) from None
    if args.reps is not None:
        try:
            config = dataclasses.replace(config, reps=args.reps)
        except ConfigError as exc:
            raise CliError(f"invalid config: {exc}", EXIT_INPUT) from None
    if args.workers < 1:
        raise CliError("--workers must be >= 1", EXIT_INPUT)

    def progress(k):
        if not args.quiet and (k % max(1, config.reps // 20) == 0 or k == config.reps):
            print(f"\r{k}/{config.reps} replications", end="", file=sys.stderr, flush=True)

    report = run_study(config, workers=args.workers, progress=progress)
    if not args.quiet:
        print(file=sys.stderr)
    try:
        if args.out_csv:
            with open(args.out_csv, "w", newline="") as fh:
                fh.write(report.to_csv())
        if args.out_json:
            with open(args.out_json, "w") as fh:
                fh.write(report.to_json(indent=2) + "\n")
    except OSError as exc:
        raise CliError(f"cannot write report: {exc.strerror or exc}", EXIT_IO) from None
    print(report.format_table())
    print(f"\n{report.reps} replications in {report.elapsed:.1f}s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kroncov", description="Quadratic-form Kronecker covariance estimation and mean tests.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="fit the Kronecker covariance model to a CSV panel")
    e.add_argument("data", help="CSV file, T rows by n columns, optional header")
    e.add_argument("--shape", required=True, help='factorization such as "2x5x2"')
    e.add_argument("--mean", choices=("estimated", "zero", "file"), default="estimated")
    e.add_argument("--mu", help="CSV with the known mean (with --mean file)")
    e.add_argument("-o", "--out", help="write the estimate JSON here instead of stdout")
    e.set_defaults(func=cmd_estimate)

    t = sub.add_parser("test-mean", help="LM / Wald test of H0: mu = mu0")
    t.add_argument("data")
    t.add_argument("--shape", required=True)
    g = t.add_mutually_exclusive_group(required=True)
    g.add_argument("--mu0", help="CSV with the hypothesized mean")
    g.add_argument("--mu0-zero", action="store_true", help="test mu = 0")
    t.add_argument("--stat", choices=("lm", "wald", "both"), default="both")
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--two-sided", action="store_true", help="reject on |standardized| instead of the upper tail")
    t.set_defaults(func=cmd_test_mean)

    lr = sub.add_parser("test-linear", help="Wald test of H0: R mu = r")
    lr.add_argument("data")
    lr.add_argument("--shape", required=True)
    lr.add_argument("--R", required=True, help="CSV with the q x n restriction matrix")
    lr.add_argument("--r", help="CSV with the length-q right-hand side (default zeros)")
    lr.add_argument("--normalize", action="store_true", help="rescale rows of R to unit l2 norm")
    lr.add_argument("--alpha", type=float, default=None)
    lr.set_defaults(func=cmd_test_linear)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a TOML or JSON config")
    s.add_argument("config")
    s.add_argument("--out-csv")
    s.add_argument("--out-json")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--reps", type=int, help="override the replication count")
    s.add_argument("-q", "--quiet", action="store_true")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"kroncov: {exc}", file=sys.stderr)
        return exc.status
    except (SingularFactorError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"kroncov: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
