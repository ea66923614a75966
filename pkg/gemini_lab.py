#!/usr/bin/env python3
"""
Gemini Lab command line.

    gemini_lab.py gen-surfaces --config gen.json --out pool/
    gemini_lab.py regress --config regress.json --seed 3
    gemini_lab.py optimize --config suite.json --threads 4
    gemini_lab.py report runs/
    gemini_lab.py schema optimize

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

from config import (
    COMMAND_CONFIGS,
    ConfigError,
    GenSurfacesConfig,
    OptimizeConfig,
    RegressConfig,
    ReportConfig,
    Settings,
    config_schema,
    load_config,
    setup_logging,
)
import lab_runner

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gemini_lab", description="Dual-fidelity surrogate and optimization lab")
    parser.add_argument("--log-level", default=None, help="Logging level (default from GEMINI_LAB_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed")
        p.add_argument("--out", default=None, help="Output directory")
        p.add_argument("--threads", type=int, default=None, help="Worker threads")

    add_common(sub.add_parser("gen-surfaces", help="Generate a Spearman-binned pool of GP surface pairs"))
    add_common(sub.add_parser("regress", help="Learning curves of Gemini against single-network baselines"))
    add_common(sub.add_parser("optimize", help="Run a suite of closed-loop campaigns"))

    report = sub.add_parser("report", help="Summarize stored campaign records")
    report.add_argument("directory", help="Directory of *.jsonl campaign records")
    report.add_argument("--config", default=None, help="Optional report config")
    report.add_argument("--out", default=None, help="Output directory (default: the record directory)")

    schema = sub.add_parser("schema", help="Print the JSON schema of a command config")
    schema.add_argument("name", choices=sorted(COMMAND_CONFIGS))
    return parser


def run(args: argparse.Namespace, settings: Settings) -> None:
    threads = args.threads if getattr(args, "threads", None) else settings.threads
    out = getattr(args, "out", None) or settings.out_dir

    if args.command == "schema":
        print(json.dumps(config_schema(args.name), indent=2))
        return

    if args.command == "report":
        config = load_config(args.config, ReportConfig) if args.config else ReportConfig()
        summary = lab_runner.report(args.directory, config, args.out)
        print(summary.to_string(index=False))
        return

    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be at least 1")

    if args.command == "gen-surfaces":
        config = load_config(args.config, GenSurfacesConfig, {"seed": args.seed})
        manifest = lab_runner.gen_surfaces(config, out, threads)
        print(f"✅ {len(manifest)} surface pairs written to {out}")
    elif args.command == "regress":
        config = load_config(args.config, RegressConfig, {"seed": args.seed})
        summary = lab_runner.regress(config, out, threads)
        print(summary.to_string(index=False))
    elif args.command == "optimize":
        config = load_config(args.config, OptimizeConfig)
        if args.seed is not None:
            config.campaigns = [c.model_copy(update={"seed": args.seed}) for c in config.campaigns]
        summary = lab_runner.optimize(config, out, threads)
        print(summary.to_string(index=False))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = Settings.from_env()
    except Exception as e:
        print(f"❌ Invalid environment settings: {e}", file=sys.stderr)
        return EXIT_CONFIG
    setup_logging(args.log_level or settings.log_level)

    try:
        run(args, settings)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
