"""``lmpforge`` command line: synth, ingest, train, forecast, evaluate.

Exit codes: 0 success, 1 validation error (bad input or config), 2 runtime failure.
Set ``LMPFORGE_LOG`` (DEBUG, INFO, WARNING, ...) for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import GridMap, load_feature_set, write_price_csv
from .evaluation import EvaluationError
from .forecast import read_forecast_csv, write_forecast_csv
from .models import ConfigError
from .synth import SynthSpec, synth_generate
from .workflow import (
    CASE_ALIASES,
    RunConfig,
    check_compatible,
    load_model,
    run_forecast,
    run_training,
    step_mode,
    write_json,
    write_reports,
)

log = logging.getLogger("lmpforge")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _dataset(prices, grid_path):
    if not prices or not grid_path:
        raise ConfigError("price CSV and grid map are required (--data/--grid or the data section)")
    grid = GridMap.load(grid_path)
    return load_feature_set(prices, grid), grid


def cmd_synth(args) -> int:
    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    features = synth_generate(spec)
    write_price_csv(out / "prices.csv", features)
    spec.grid().save(out / "grid.json")
    write_json(out / "synth_spec.json", spec.to_dict())
    T = features["RTLMP"].steps
    print(f"wrote {T * spec.rows * spec.cols * len(features.names)} rows ({T} hours, {spec.rows * spec.cols} nodes) to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    features, grid = _dataset(args.data, args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_price_csv(out / "prices.csv", features)
    grid.save(out / "grid.json")
    ref = features[features.names[0]]
    summary = {
        "features": features.names,
        "rows": grid.rows,
        "cols": grid.cols,
        "hours": ref.steps,
        "start": str(ref.time_index[0]),
        "end": str(ref.time_index[-1]),
        "whole_days": ref.steps % 24 == 0,
    }
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.case is not None:
        overrides["case"] = CASE_ALIASES[args.case]
    if args.max_iterations is not None:
        overrides["max_iterations"] = args.max_iterations
    if overrides:
        run = RunConfig.from_dict({**run.resolved(), "model": run.model, "train": {**run.train.to_dict(), **overrides}})
    if args.data:
        run.data["prices"] = args.data
    if args.grid:
        run.data["grid"] = args.grid
    features, grid = _dataset(run.data["prices"], run.data["grid"])
    _, trainlog = run_training(features, grid, run, args.out)
    last = trainlog[-1] if trainlog else None
    msg = f"trained {len(trainlog)} iterations" + (f", final g_lp {last.g_lp:.4f}" if last else "")
    print(f"{msg}; checkpoint in {args.out}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    gan, sidecar = load_model(args.checkpoint)
    mode = step_mode(gan.config.case)
    if args.mode and args.mode != mode:
        raise ConfigError(f"checkpoint is a {gan.config.case} model which forecasts {mode}-ahead, not {args.mode}-ahead")
    grid = GridMap.load(args.grid) if args.grid else sidecar.grid
    check_compatible(sidecar, grid)
    features = load_feature_set(args.data, grid)
    windows = [tuple(w) for w in args.window] if args.window else None
    frame = run_forecast(gan, sidecar, features, windows, args.calibration_window)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_forecast_csv(out, frame)
    write_json(
        out.with_name(out.stem + ".config.json"),
        {
            "checkpoint": str(args.checkpoint),
            "data": str(args.data),
            "mode": mode,
            "calibration_window": args.calibration_window,
            "windows": [list(w) for w in windows] if windows else [],
            "model": gan.config.to_dict(),
        },
    )
    print(f"wrote {n} forecast rows to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        frame = read_forecast_csv(args.forecast)
    except (KeyError, TypeError) as exc:
        raise EvaluationError(f"{args.forecast}: malformed forecast CSV ({exc})") from exc
    out = Path(args.out)
    report = write_reports(frame, out, args.mode, args.threshold)
    write_json(out / "run_config.json", {"forecast": str(args.forecast), "mode": args.mode, "near_zero_threshold": args.threshold})
    print(report.to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmpforge", description="GAN-based spatio-temporal RTLMP forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic price dataset")
    p.add_argument("--spec", help="SynthSpec JSON (defaults when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate a price CSV, fill short gaps, write a clean copy")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--data", help="price CSV (overrides data.prices)")
    p.add_argument("--grid", help="grid map JSON (overrides data.grid)")
    p.add_argument("--seed", type=int)
    p.add_argument("--case", choices=sorted(CASE_ALIASES))
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="rolling one-step-ahead forecasts with calibration")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or training output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", help="grid map JSON (defaults to the training grid)")
    p.add_argument("--mode", choices=["hour", "day"])
    p.add_argument("--window", nargs=2, action="append", metavar=("START", "END"),
                   help="first target step and exclusive end (repeatable)")
    p.add_argument("--calibration-window", type=int, default=4)
    p.add_argument("--out", required=True, help="forecast CSV path")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="MAPE report against the persistence baseline")
    p.add_argument("--forecast", required=True)
    p.add_argument("--mode", choices=["hour", "day"], default="hour", help="persistence lag")
    p.add_argument("--threshold", type=float, default=1.0, help="near-zero truth cutoff ($/MWh)")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("LMPFORGE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
