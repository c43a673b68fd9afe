"""Command-line entry point: ``calibsmooth <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .baselines import fit_temperature
from .data import DataFormatError
from .metrics import RecordFormatError, read_records, write_records
from .numerics import forward

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

# flag -> dotted config path
OVERRIDES = {
    "seed": "seed",
    "out": "out",
    "lambda_on": "smoothing.lambda_on",
    "lambda_off": "smoothing.lambda_off",
    "delta_on": "smoothing.delta_on",
    "delta_off": "smoothing.delta_off",
    "delta_y": "smoothing.delta_y",
    "baseline": "method",
    "tau_upper": "metrics.tau_upper",
}


class UsageError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--lambda-on", type=float)
    p.add_argument("--lambda-off", type=float)
    p.add_argument("--delta-on", type=float)
    p.add_argument("--delta-off", type=float)
    p.add_argument("--delta-y", type=float)
    p.add_argument("--baseline", choices=ex.METHODS, help="method to run (default manifold-smoothing)")
    p.add_argument("--tau-upper", type=_floats, help="comma-separated NBAUCC upper thresholds")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config path, e.g. optim.epochs=5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calibsmooth", description="Calibration via on- and off-manifold smoothing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write its run artifact")
    _common(p)

    p = sub.add_parser("evaluate", help="report for a saved model on the configured data")
    _common(p)
    p.add_argument("--model", type=Path, required=True, help="model.npz written by train")

    p = sub.add_parser("calibrate", help="fit a temperature on dev logits and re-report")
    _common(p)
    p.add_argument("--model", type=Path, required=True)

    p = sub.add_parser("sweep", help="vary one perturbation radius over a grid")
    _common(p)
    p.add_argument("--parameter", choices=ex.SWEEP_PARAMETERS, required=True)
    p.add_argument("--grid", type=_floats, required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("ablate", help="vanilla / R_on only / R_off only / both")
    _common(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("score", help="metrics over a prediction-record file")
    p.add_argument("records", type=Path)
    p.add_argument("--ece-bins", type=int, default=10)
    p.add_argument("--ece-scheme", choices=("equal-width", "equal-mass"), default="equal-width")
    p.add_argument("--tau-upper", type=_floats, default=[0.5, 0.7, 1.0])
    p.add_argument("--out", type=Path)
    return parser


def resolve_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    values = ex.load_config(args.config) if args.config else {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        ex.set_path(values, key.strip(), _parse_value(raw.strip()))
    for flag, path in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            ex.set_path(values, path, str(value) if isinstance(value, Path) else value)
    return ex.config_from_dict(values)


def _emit(report, records, metrics, out: Path | None) -> None:
    print(report.format_table())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ex.write_report(report, records, metrics, out)
        write_records(out / "records.txt", records)


def _write_rows(rows: list[dict], out: Path | None, name: str) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ex.write_table(rows, out / name)
    keys = [k for k in rows[0] if not k.endswith("_std")]
    print("\t".join(keys))
    for row in rows:
        print("\t".join(f"{row.get(k):.4f}" if isinstance(row.get(k), float) else str(row.get(k)) for k in keys))


def cmd_train(args) -> None:
    config = resolve_config(args)
    artifact = ex.train(config)
    print(artifact.report.format_table())
    if config.out is not None:
        ex.save_artifact(artifact, config.out)
    print(f"wall-clock {artifact.wall_clock:.2f}s")


def cmd_evaluate(args) -> None:
    config = resolve_config(args)
    predictor = ex.load_predictor(args.model, config)
    report, records = ex.evaluate(predictor, ex.load_data(config.data), config.metrics)
    _emit(report, records, config.metrics, args.out)


def cmd_calibrate(args) -> None:
    config = resolve_config(args)
    bundle = ex.load_data(config.data)
    predictor = ex.load_predictor(args.model, config)
    bl = config.baseline
    t = fit_temperature(forward(predictor.model, bundle.dev_x).logits, bundle.dev_y, bl.temperature_min, bl.temperature_max)
    predictor = ex.Predictor(predictor.model, "temperature-scaling", t)
    report, records = ex.evaluate(predictor, bundle, config.metrics)
    print(f"temperature {t:.6f}")
    _emit(report, records, config.metrics, args.out)
    if args.out is not None:
        np.savez(args.out / "model.npz", temperature=np.array(t), **predictor.model.to_arrays())


def cmd_sweep(args) -> None:
    config = resolve_config(args)
    rows = ex.sweep(config, args.parameter, args.grid, args.repeats, workers=args.workers)
    _write_rows(rows, args.out, f"sweep_{args.parameter}.csv")


def cmd_ablate(args) -> None:
    config = resolve_config(args)
    rows = ex.ablate(config, args.repeats, workers=args.workers)
    _write_rows(rows, args.out, "ablation.csv")


def cmd_score(args) -> None:
    metrics = ex.MetricConfig(ece_bins=args.ece_bins, ece_scheme=args.ece_scheme, tau_upper=args.tau_upper)
    records = read_records(args.records)
    _emit(ex.report_from_records(records, metrics), records, metrics, args.out)


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "score": cmd_score,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ex.ConfigError, UsageError, DataFormatError, RecordFormatError, ex.TrainingDivergedError, OSError, ValueError) as exc:
        # one JSON line on stderr so wrappers can parse the failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
