"""Command line: ``incprompt {run,sweep,report,validate-config}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError
from .experiment import SWEEP_AXES, report_selection_histogram, run_experiment, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _add_config_args(p):
    p.add_argument("config", help="TOML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set train.epochs=2 (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--output-dir", default=None, help="override output_dir (wins over the env var)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incprompt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_config_args(sub.add_parser("run", help="run the configured methods"))
    p = sub.add_parser("sweep", help="ablate prompt depth or prompt length")
    _add_config_args(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated integers, e.g. 0,2,4,8")
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("report", help="render the prompter-selection histogram of a run")
    p.add_argument("run_dir")
    _add_config_args(sub.add_parser("validate-config", help="check a config without running"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        try:
            path = report_selection_histogram(args.run_dir)
        except (FileNotFoundError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(path)
        return EXIT_OK

    try:
        cfg = load_config(args.config, args.overrides, args.output_dir, args.seed)
        values = None
        if args.command == "sweep":
            values = [int(v) for v in args.values.split(",") if v.strip()]
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate-config":
        print(f"{args.config}: ok")
        return EXIT_OK
    try:
        if args.command == "run":
            reports = run_experiment(cfg)
            for r in reports:
                forg = "NA" if not r.forgetting_defined else f"{r.forgetting:.4f}"
                print(f"{r.method:12s} avg_acc={r.avg_acc:.4f} forgetting={forg}")
        else:
            for v, acc, forg, _ in run_sweep(cfg, args.axis, values, args.workers):
                print(f"{args.axis}={v:<4d} avg_acc={acc:.4f} forgetting={forg:.4f}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logging.getLogger(__name__).exception("run failed")
        print(f"runtime failure: {exc} (outputs in {cfg.output_dir} flagged incomplete)", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
