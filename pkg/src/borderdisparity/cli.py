"""Command line entry point: ``bdi <subcommand> --config cfg.json``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import BDIError, ConfigError
from .ingestion import fetch_acs_extract
from .pipeline import (
    ATTRIBUTES,
    load_config,
    run_bdi,
    run_contiguity,
    run_pipeline,
    run_regress,
)

DEFAULT_ACS_ENDPOINT = "https://api.census.gov/data/2016/acs/acs5"


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, type=Path, help="JSON config file")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int)
    p.add_argument("--snap-tolerance", type=float, dest="snap_tolerance")
    p.add_argument("--attribute", choices=ATTRIBUTES)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdi", description="Border Disparity Index analysis for polygon geounits."
    )
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True

    p = sub.add_parser("fetch", help="download an ACS block-group attribute extract")
    _common(p, config_required=False)
    p.add_argument("--acs-endpoint", dest="acs_endpoint")
    p.add_argument("--acs-key-env", dest="acs_key_env")
    p.add_argument("--state")
    p.add_argument("--county", action="append", help="county FIPS code; repeatable")

    p = sub.add_parser("contiguity", help="write row-normalized Queen weights")
    _common(p)
    p = sub.add_parser("bdi", help="compute NDI and BDI for every analysis unit")
    _common(p)
    p = sub.add_parser("analyze", help="run the full pipeline")
    _common(p)
    p = sub.add_parser("regress", help="fit regressions on a saved place_summary.csv")
    _common(p)
    p.add_argument("--input", type=Path, help="place_summary.csv (default: <out>/place_summary.csv)")
    return parser


def _fetch(args) -> list[Path]:
    acs: dict = {}
    if args.config is not None:
        try:
            acs = json.loads(args.config.read_text(encoding="utf-8")).get("acs", {})
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    endpoint = args.acs_endpoint or acs.get("endpoint") or DEFAULT_ACS_ENDPOINT
    key_env = args.acs_key_env or acs.get("key_env") or "CENSUS_API_KEY"
    state = args.state or acs.get("state")
    counties = args.county or acs.get("counties") or []
    if not state or not counties:
        raise ConfigError("fetch needs --state and at least one --county")
    out = args.out or Path(acs.get("out", "."))
    path = fetch_acs_extract(
        endpoint, [(state, c) for c in counties], out / "attributes.csv", key_env=key_env
    )
    return [path]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "fetch":
            written = _fetch(args)
        else:
            overrides = {
                "seed": args.seed,
                "snap_tolerance": args.snap_tolerance,
                "attribute": args.attribute,
            }
            config = load_config(args.config, overrides, command=args.command)
            out = args.out or config.output_dir
            if args.command == "contiguity":
                written = run_contiguity(config, out)
            elif args.command == "bdi":
                written = run_bdi(config, out, threads=args.threads)
            elif args.command == "analyze":
                written = run_pipeline(config, out, threads=args.threads)
            else:
                source = args.input or Path(out) / "place_summary.csv"
                if not source.exists():
                    raise ConfigError(f"place summary {source} not found", [str(source)])
                written = run_regress(config, source, out)
    except BDIError as exc:
        print(json.dumps(exc.as_dict()), file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
