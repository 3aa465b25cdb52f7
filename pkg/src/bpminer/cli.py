"""Operator-facing command line.

Subcommands: fetch, ingest, filter, extract, validate, analyze, run,
report. Exit codes: 0 success, 2 config error, 3 stage failure, 4 budget
exhausted.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from bpminer import __version__
from bpminer.errors import BPMinerError, BudgetExhaustedError, ConfigError
from bpminer.ingest import fetch_files
from bpminer.pipeline import PipelineConfig, RunManifest, report, run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_BUDGET = 4

# CLI subcommand -> pipeline stages it drives ("extract" covers querying
# the backend and parsing the answers).
_STAGE_COMMANDS = {
    "ingest": ["ingest"],
    "filter": ["filter"],
    "extract": ["extract", "parse"],
    "validate": ["validate"],
    "analyze": ["analyze"],
    "run": None,
}


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config JSON file")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--backend", choices=["remote", "mock"],
                        help="extraction backend (overrides config)")
    common.add_argument("--seed", type=int, help="analysis RNG seed (overrides config)")
    common.add_argument("--max-requests", type=int,
                        help="budget of non-cached backend calls")
    common.add_argument("--parallelism", type=int,
                        help="concurrent backend requests")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="bpminer",
        description="Mine sex-stratified blood-pressure statistics from "
                    "biomedical abstracts.",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"bpminer {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fetch = sub.add_parser("fetch", parents=[common],
                           help="download baseline files from a URL list")
    fetch.add_argument("--urls", type=Path, required=True,
                       help="text file with one URL per line")
    fetch.add_argument("--dest", type=Path, required=True,
                       help="directory to download into")

    for name, help_text in [
        ("ingest", "parse baseline files into the record file"),
        ("filter", "apply the two-stage keyword refinement"),
        ("extract", "query the backend and parse the ten-variable answers"),
        ("validate", "range/cohort gates and grounding review"),
        ("analyze", "fit mixtures, export grids, contours, peaks"),
        ("run", "run every stage end to end"),
    ]:
        sub.add_parser(name, parents=[common], help=help_text)

    sub.add_parser("report", parents=[common],
                   help="print the human-readable run summary")
    return parser


def _load_config(args) -> PipelineConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    config = PipelineConfig.from_file(args.config)
    if args.out is not None:
        config.out_dir = args.out
    if args.backend is not None:
        config.backend = args.backend
    if args.seed is not None:
        config.analysis.seed = args.seed
    if args.max_requests is not None:
        config.max_requests = args.max_requests
    if args.parallelism is not None:
        config.parallelism = args.parallelism
    return config


def _cmd_fetch(args) -> int:
    urls = [line.strip() for line in args.urls.read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.startswith("#")]
    paths = fetch_files(urls, args.dest)
    print(f"fetched {len(paths)} file(s) into {args.dest}")
    return EXIT_OK


def _cmd_report(args) -> int:
    if args.out is not None:
        out_dir = args.out
    elif args.config is not None:
        out_dir = _load_config(args).out_dir
    else:
        raise ConfigError("report needs --out or --config")
    manifest = RunManifest.load(Path(out_dir) / "manifest.json")
    if manifest is None:
        raise ConfigError(f"no manifest found under {out_dir}")
    print(report(manifest, out_dir))
    return EXIT_OK


def _cmd_stages(args, stages) -> int:
    config = _load_config(args)
    if stages is not None:
        config.stages = stages
    manifest = run(config)
    for name, record in manifest.stages.items():
        if record.status == "completed":
            state = "skipped (up to date)" if record.skipped else "completed"
            print(f"stage {name}: {state} {record.counts}")
    if args.command == "run":
        print()
        print(report(manifest, config.out_dir))
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "fetch":
            return _cmd_fetch(args)
        if args.command == "report":
            return _cmd_report(args)
        return _cmd_stages(args, _STAGE_COMMANDS[args.command])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExhaustedError as exc:
        print(f"halted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except BPMinerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
