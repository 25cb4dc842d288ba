"""``hmmar`` command line: simulate, fit, loglik, forecast, decode.

Exit codes: 0 ok, 2 input error, 3 numerical divergence, 4 EM did not
converge (the report is still written). ``HMMAR_LOG`` sets the stderr
log level (error, info or debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from hmmar.em import FitConfig, fit
from hmmar.errors import FitFailedError, InvalidInputError, NumericalFailureError
from hmmar.forward_backward import decode_map_path, forecast_one_step, forward, posteriors
from hmmar.io import path_to_csv, read_model, read_series_csv, series_to_csv
from hmmar.simulate import SimSpec, simulate_path

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_NOT_CONVERGED = 4

log = logging.getLogger("hmmar")


def _emit(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        Path(path).write_text(text)


def cmd_simulate(args: argparse.Namespace) -> int:
    params = read_model(args.model)
    spec = SimSpec(params=params, T=args.length, seed=args.seed, warmup=args.warmup)
    series, states = simulate_path(spec)
    text = series_to_csv(series, states if args.emit_states else None, p=params.p)
    _emit(text, args.output)
    return EXIT_OK


def fit_config_from_args(args: argparse.Namespace) -> FitConfig:
    return FitConfig(
        max_iters=args.max_iters,
        tol=args.tol,
        n_restarts=args.restarts,
        seed=args.seed,
        sigma_floor_factor=args.sigma_floor_factor,
        ridge_factor=args.ridge_factor,
        rho_update=args.rho_update,
    )


def cmd_fit(args: argparse.Namespace) -> int:
    series = read_series_csv(args.data)
    cfg = fit_config_from_args(args)
    init = read_model(args.init) if args.init else None
    report = fit(series, args.K, args.p, cfg, init=init, n_jobs=args.jobs)
    log.info("%s", report.summary())
    for w in report.warnings:
        log.warning("%s", w)
    _emit(report.to_json() + "\n", args.output)
    if args.emit_posteriors:
        Path(args.emit_posteriors).write_text(posteriors(series, report.params).to_csv(args.p))
    if not report.converged:
        log.error("EM stopped after %d iterations without converging", report.iterations)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_loglik(args: argparse.Namespace) -> int:
    series = read_series_csv(args.data)
    params = read_model(args.model)
    _emit(f"{forward(series, params).loglik!r}\n", args.output)
    return EXIT_OK


def cmd_forecast(args: argparse.Namespace) -> int:
    if args.horizon != 1:
        raise InvalidInputError("only --horizon 1 is supported")
    series = read_series_csv(args.data)
    params = read_model(args.model)
    _emit(json.dumps(forecast_one_step(series, params), indent=2) + "\n", args.output)
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    series = read_series_csv(args.data)
    params = read_model(args.model)
    _emit(path_to_csv(decode_map_path(series, params), params.p), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmmar", description="Hidden Markov mixture autoregressive models.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="simulate a series from a model JSON file")
    sp.add_argument("model")
    sp.add_argument("--length", "-T", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--warmup", type=int, default=200)
    sp.add_argument("--emit-states", action="store_true", help="add the hidden state column z")
    sp.add_argument("--output", "-o")
    sp.set_defaults(func=cmd_simulate)

    fp = sub.add_parser("fit", help="estimate a model by EM")
    fp.add_argument("data")
    fp.add_argument("--K", "-K", type=int, required=True)
    fp.add_argument("--p", "-p", type=int, required=True)
    defaults = FitConfig()
    fp.add_argument("--max-iters", type=int, default=defaults.max_iters)
    fp.add_argument("--tol", type=float, default=defaults.tol)
    fp.add_argument("--restarts", type=int, default=defaults.n_restarts)
    fp.add_argument("--seed", type=int, default=0)
    fp.add_argument("--sigma-floor-factor", type=float, default=defaults.sigma_floor_factor)
    fp.add_argument("--ridge-factor", type=float, default=defaults.ridge_factor)
    fp.add_argument("--rho-update", choices=["first", "occupancy"], default=defaults.rho_update)
    fp.add_argument("--init", help="start a single EM run from this model JSON")
    fp.add_argument("--jobs", type=int, default=1, help="restarts run in parallel threads")
    fp.add_argument("--emit-posteriors", metavar="PATH", help="write smoothed posteriors CSV")
    fp.add_argument("--output", "-o")
    fp.set_defaults(func=cmd_fit)

    lp = sub.add_parser("loglik", help="conditional log-likelihood of data under a model")
    lp.add_argument("data")
    lp.add_argument("model")
    lp.add_argument("--output", "-o")
    lp.set_defaults(func=cmd_loglik)

    cp = sub.add_parser("forecast", help="one-step-ahead predictive mixture")
    cp.add_argument("data")
    cp.add_argument("model")
    cp.add_argument("--horizon", type=int, default=1)
    cp.add_argument("--output", "-o")
    cp.set_defaults(func=cmd_forecast)

    dp = sub.add_parser("decode", help="most likely hidden path")
    dp.add_argument("data")
    dp.add_argument("model")
    dp.add_argument("--output", "-o")
    dp.set_defaults(func=cmd_decode)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("HMMAR_LOG", "error").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.ERROR),
        format="hmmar: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (InvalidInputError, OSError) as exc:
        print(f"hmmar: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalFailureError, FitFailedError) as exc:
        print(f"hmmar: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
