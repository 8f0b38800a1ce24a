"""Command-line entry point.

Usage::

    vergepipe <stage> --config run.yaml [--seed N] [--backend live|mock]
    vergepipe geojson --config run.yaml [--source manifest|snaps] [--out file]

Stages: ingest, snap, plan, curate, split, fetch, evaluate, all.
Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, StageError, export_geojson, run


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vergepipe",
        description="Roadside-verge survey curation and evaluation pipeline",
    )
    parser.add_argument(
        "stage",
        choices=list(STAGES) + ["all", "geojson"],
        help="pipeline stage to run (or 'geojson' to export inspection points)",
    )
    parser.add_argument("--config", required=True, help="YAML run configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument(
        "--backend", choices=["live", "mock"], default=None, help="override the configured backend"
    )
    parser.add_argument("--output", default=None, help="override the configured output directory")
    parser.add_argument(
        "--source",
        choices=["manifest", "snaps"],
        default="manifest",
        help="artifact to export when stage is 'geojson'",
    )
    parser.add_argument("--out", default=None, help="file for geojson output (default: stdout)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.backend is not None:
            cfg.backend = args.backend
        if args.output is not None:
            cfg.output_dir = args.output
        cfg.validate()
    except ConfigError as exc:
        print(f"vergepipe: {exc}", file=sys.stderr)
        return 1

    try:
        if args.stage == "geojson":
            payload = export_geojson(cfg, kind=args.source)
            if args.out:
                with open(args.out, "wb") as fh:
                    fh.write(payload)
            else:
                sys.stdout.buffer.write(payload)
            return 0
        results = run(args.stage, cfg)
    except StageError as exc:
        print(f"vergepipe: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface anything else as a stage failure
        print(f"vergepipe: stage {args.stage} failed: {exc}", file=sys.stderr)
        return 2

    for stage_name, summary in results.items():
        print(f"{stage_name}: {json.dumps(summary, sort_keys=True)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
