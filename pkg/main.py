"""Command line entry point: sample data, estimate covariances, run risk studies.

    python main.py sample --dims 4,4,4 --n 1 --seed 7 --out x.tnsr.json
    python main.py estimate --method umree --in x.tnsr.json --iters 1250 --burnin 250 --seed 7 --out est.json
    python main.py simulate --config sim.json --out report.csv

Exit codes: 0 on success, 1 on usage errors, 2 on numerical failures.
"""

import argparse
import sys
from typing import List, Optional

import numpy as np
from loguru import logger

import config
from array_normal import SeparableCovariance, sample_array_normal
from estimators import (
    EstimatorOutput,
    GibbsConfig,
    gibbs_chain,
    mle_flipflop,
    mwte,
    stein_umree,
    umree,
    umree_weighted,
)
from evaluation import configure_logging
from matrix_stats import RngStream
from risk_harness import ESTIMATORS, SimConfig, run_risk_study
from tensor_core import ArrayNormalError, ParameterError, ShapeError, center_samples
from utils import load_covariance, load_json, load_tensor, parse_dims, parse_weights, save_covariance, save_tensor

METHODS = ("mle", "umree", "umree_weighted", "stein_umree", "mwte")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class UsageError(Exception):
    """Bad command line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _dims_arg(text: str) -> List[int]:
    try:
        return parse_dims(text)
    except ArrayNormalError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _weights_arg(text: str) -> List[float]:
    try:
        return parse_weights(text)
    except ArrayNormalError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arraynormal", description="Array normal covariance estimation")
    parser.add_argument("--log-level", default=None, help="console log level (default from config)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sample = sub.add_parser("sample", help="draw array normal data")
    sample.add_argument("--dims", type=_dims_arg, required=True, help="mode dimensions, e.g. 4,4,4")
    sample.add_argument("--n", type=int, default=1, help="number of samples")
    sample.add_argument("--seed", type=int, default=config.MASTER_SEED)
    sample.add_argument("--truth", default=None, help="covariance JSON (default sigma2=1, identity factors)")
    sample.add_argument("--out", required=True, help="output .tnsr.json path")

    estimate = sub.add_parser("estimate", help="estimate a separable covariance")
    estimate.add_argument("--method", choices=METHODS, default="umree")
    estimate.add_argument("--in", dest="input", required=True, help="input .tnsr.json with a trailing sample mode")
    estimate.add_argument("--out", required=True, help="output covariance JSON path")
    estimate.add_argument("--iters", type=int, default=config.GIBBS_TOTAL_ITERS, help="Gibbs iterations")
    estimate.add_argument("--burnin", type=int, default=config.GIBBS_BURN_IN, help="Gibbs burn-in")
    estimate.add_argument("--seed", type=int, default=config.MASTER_SEED)
    estimate.add_argument("--weights", type=_weights_arg, default=None, help="mode weights for umree_weighted")
    estimate.add_argument("--T", dest="T", type=int, default=config.MWTE_T, help="rotations for mwte")
    estimate.add_argument("--center", action="store_true", help="remove the sample mean first")

    simulate = sub.add_parser("simulate", help="run a Monte Carlo risk study")
    simulate.add_argument("--config", required=True, help="study config JSON")
    simulate.add_argument("--out", required=True, help="per-replicate CSV path")
    simulate.add_argument("--json-out", default=None, help="optional JSON report path")
    simulate.add_argument("--workers", type=int, default=None, help="worker processes")
    return parser


def run_estimator(method: str, X: np.ndarray, args: argparse.Namespace) -> EstimatorOutput:
    """Dispatch one estimator by name with the CLI settings."""
    if method == "mle":
        return mle_flipflop(X)
    gibbs = GibbsConfig(total_iters=args.iters, burn_in=args.burnin, rng=RngStream(args.seed))
    if method == "mwte":
        return mwte(X, T=args.T, cfg=gibbs)
    if method == "stein_umree":
        gibbs.full_precision = True
        return stein_umree(gibbs_chain(X, gibbs))
    chain = gibbs_chain(X, gibbs)
    if method == "umree_weighted":
        return umree_weighted(chain, args.weights)
    return umree(chain)


def _read_input(loader, path: str):
    """Load an input file, reporting malformed content as a usage error."""
    try:
        return loader(path)
    except (ParameterError, ShapeError) as e:
        raise UsageError(f"invalid input file {path}: {e}") from e


def cmd_sample(args: argparse.Namespace) -> int:
    dims = tuple(args.dims)
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    truth = _read_input(load_covariance, args.truth) if args.truth else SeparableCovariance.identity(dims)
    if truth.dims != dims:
        raise UsageError(f"--truth has dims {truth.dims}, expected {dims}")
    X = sample_array_normal(dims, truth, args.n, RngStream(args.seed).generator())
    save_tensor(X, args.out)
    print(f"Wrote tensor of shape {X.shape} to {args.out}")
    return EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    if args.method == "umree_weighted" and args.weights is None:
        raise UsageError("--weights is required for --method umree_weighted")
    X = _read_input(load_tensor, args.input)
    if X.ndim < 2:
        raise UsageError(f"input needs a trailing sample mode, got shape {X.shape}")
    if args.weights is not None and len(args.weights) != X.ndim - 1:
        raise UsageError(f"--weights needs {X.ndim - 1} values, got {len(args.weights)}")
    if args.center:
        X = center_samples(X)
    result = run_estimator(args.method, X, args)
    save_covariance(result.estimate, args.out, result.diagnostics())
    print(f"{args.method}: sigma2={result.estimate.sigma2:.6g}, dims={result.estimate.dims} -> {args.out}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    payload = _read_input(load_json, args.config)
    if args.workers is not None:
        payload["workers"] = args.workers
    try:
        cfg = SimConfig.from_dict(payload)
        unknown = [name for name in cfg.estimators if name not in ESTIMATORS]
        if unknown:
            raise ParameterError(f"unknown estimators {unknown}; available: {sorted(ESTIMATORS)}")
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid study config {args.config}: {e}") from e
    report = run_risk_study(cfg)
    summary_path = report.to_csv(args.out)
    if args.json_out:
        report.to_json(args.json_out)
    print(report.summary.to_string(index=False))
    print(f"Wrote {args.out} and {summary_path}")
    return EXIT_OK


COMMANDS = {"sample": cmd_sample, "estimate": cmd_estimate, "simulate": cmd_simulate}


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Run the command line interface.

    Args:
        argv: Arguments without the program name (defaults to sys.argv[1:]).

    Returns:
        int: 0 on success, 1 on usage errors, 2 on numerical failures.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args.log_level)
        return COMMANDS[args.command](args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ArrayNormalError, np.linalg.LinAlgError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(cli_main())
