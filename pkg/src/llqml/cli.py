"""Command-line entry point: ``simulate``, ``estimate``, ``experiment`` and ``oracle``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .errors import ConfigError, LLQMLError, NoOracle
from .harness import ExperimentConfig, emit_report, load_config, run_experiment
from .models import BUILTIN_NAMES, ObservationSeries, builtin, exact_conditional_moments, write_path_csv
from .moments import Adaptive
from .qml import OptimizerOptions, Variant, estimate
from .simulate import PathGrid, RngStream, simulate_paths

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="llqml", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate one path of a builtin model and write it as CSV")
    s.add_argument("example", choices=BUILTIN_NAMES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stream", type=int, default=0, help="replicate stream id")
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--length", type=float, default=10.0, help="time span of the path")
    s.add_argument("--every", type=int, default=1, help="write every n-th grid point")
    s.add_argument("--theta", type=_floats, help="comma-separated parameters (default: true values)")
    s.add_argument("--out", default="-", help="output CSV path, '-' for stdout")

    e = sub.add_parser("estimate", help="fit one observation series and print the result as JSON")
    e.add_argument("example", choices=BUILTIN_NAMES)
    e.add_argument("data", help="CSV with columns t, x1..xd")
    e.add_argument("--variant", default="conventional",
                   choices=("exact", "conventional", "uniform", "adaptive"))
    e.add_argument("--h", type=float, help="sub-step for the uniform variant")
    e.add_argument("--tol", type=_floats, help="rtol_y,rtol_P,atol_y,atol_P for adaptive")
    e.add_argument("--beta", type=int, default=1, choices=(1, 2))
    e.add_argument("--init", type=_floats, help="comma-separated starting parameters")
    e.add_argument("--max-iters", type=int, default=OptimizerOptions.max_iters)

    x = sub.add_parser("experiment", help="run a Monte-Carlo sweep from a JSON config")
    x.add_argument("--config", required=True)
    x.add_argument("--seed", type=int, help="override the config seed")
    x.add_argument("--threads", type=int, help="override the config worker count")
    x.add_argument("--out", help="override the config output directory")
    x.add_argument("--format", choices=("csv", "json"), default="csv")

    o = sub.add_parser("oracle", help="print closed-form conditional moments of a builtin model")
    o.add_argument("example", choices=BUILTIN_NAMES)
    o.add_argument("--x", type=_floats, required=True, help="conditioning state")
    o.add_argument("--t-from", type=float, required=True)
    o.add_argument("--t-to", type=float, required=True)
    o.add_argument("--theta", type=_floats, help="comma-separated parameters (default: true values)")
    return p


def _theta(model, values):
    if values is None:
        return model.theta0.copy()
    if len(values) != model.p:
        raise ConfigError(f"expected {model.p} parameters {model.param_names}, got {len(values)}")
    return np.array(values)


def _cmd_simulate(args) -> int:
    model = builtin(args.example)
    grid = PathGrid.spanning(model.t0, args.dt, args.length)
    paths, alive = simulate_paths(model, _theta(model, args.theta), grid,
                                  [RngStream(args.seed, args.stream)])
    if not alive[0]:
        raise LLQMLError("simulated path left the finite range")
    idx = np.arange(0, grid.n_steps + 1, max(args.every, 1))
    write_path_csv(sys.stdout if args.out == "-" else args.out, grid.times[idx], paths[0][idx])
    return EXIT_OK


def _cmd_estimate(args) -> int:
    model = builtin(args.example)
    try:
        data = ObservationSeries.from_csv(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{args.data}: {exc}") from None
    if args.tol is not None and len(args.tol) != 4:
        raise ConfigError("--tol needs four values: rtol_y,rtol_P,atol_y,atol_P")
    try:
        variant = Variant(
            args.variant, h=args.h, beta=args.beta,
            tol=Adaptive(*args.tol) if args.tol else None,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    result = estimate(model, data, variant, _theta(model, args.init),
                      OptimizerOptions(max_iters=args.max_iters))
    json.dump(result.to_dict(list(model.param_names)), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["out"] = args.out
    if overrides:
        config = ExperimentConfig(**{**config.__dict__, **overrides})
    report = run_experiment(config)
    for path in emit_report(report, args.format, config.out):
        print(path)
    failed = len(report.meta["failures"])
    if failed:
        logging.getLogger("llqml").warning("%d replicate fit(s) failed and were excluded", failed)
    return EXIT_OK


def _cmd_oracle(args) -> int:
    model = builtin(args.example)
    theta = _theta(model, args.theta)
    if len(args.x) != model.d:
        raise ConfigError(f"state must have {model.d} components")
    mu, sigma = exact_conditional_moments(model, theta, np.array(args.x), args.t_from, args.t_to)
    json.dump({"mean": np.asarray(mu).tolist(), "covariance": np.asarray(sigma).tolist()},
              sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
    "experiment": _cmd_experiment,
    "oracle": _cmd_oracle,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, NoOracle, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LLQMLError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
