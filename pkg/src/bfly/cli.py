"""Experiment runner CLI.

Usage:  bfly <subcommand> --config cfg.json --out DIR [--seed N]
        [--threads N] [--dry-run]

The config is a JSON object with an "experiment" discriminator that must
match the subcommand.  All randomness derives from the single config seed
(overridable with --seed).  Outputs: DIR/summary.json plus trace_*.csv;
rerunning with an identical config yields byte-identical files.

Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from .errors import BflyError
from .experiments import RUNNERS, ConfigError, run_gen_data, validate_config

_SUBCOMMANDS = {
    "jl-check": "jl_check",
    "approx-check": "approx_check",
    "autoencode": "autoencode",
    "two-phase": "two_phase",
    "verify-critical": "verify_critical",
    "sketch-train": "sketch_train",
    "gen-data": "gen_data",
}


def _load_config(path, expected: str, seed_override):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = validate_config(raw)
    if cfg["experiment"] != expected:
        raise ConfigError(
            f"config experiment {cfg['experiment']!r} does not match "
            f"subcommand {expected!r}"
        )
    if seed_override is not None:
        cfg["seed"] = seed_override
    return cfg


def _write_outputs(out_dir, summary: dict, traces: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    for name, rows in traces.items():
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerows(rows)


def run(config_path, out_dir, experiment: str, seed=None, threads: int = 1,
        dry_run: bool = False) -> int:
    """Execute one experiment; returns the process exit code."""
    try:
        cfg = _load_config(config_path, experiment, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if dry_run:
        plan = dict(cfg)
        plan["out_dir"] = str(out_dir)
        plan["threads"] = threads
        print(json.dumps(plan, sort_keys=True, indent=1))
        return 0
    try:
        if experiment == "gen_data":
            os.makedirs(out_dir, exist_ok=True)
            summary, traces = run_gen_data(cfg, threads=threads,
                                           out_dir=out_dir)
        else:
            summary, traces = RUNNERS[experiment](cfg, threads=threads)
        summary["seed"] = cfg["seed"]
    except BflyError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 3
    _write_outputs(out_dir, summary, traces)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bfly",
        description="Butterfly-network experiment runner",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for seed fan-out")
        p.add_argument("--dry-run", action="store_true",
                       help="validate config and print the plan only")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(
        args.config,
        args.out,
        _SUBCOMMANDS[args.subcommand],
        seed=args.seed,
        threads=args.threads,
        dry_run=args.dry_run,
    )


if __name__ == "__main__":
    sys.exit(main())
