"""Command line entry point: ``edrk <stage> [options]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 acceptance
check failure (``run --check``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_CHECK = 0, 2, 3, 4
STAGES = ("generate", "harmonize", "extract", "train", "explain", "assess", "run")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edrk", description="ED return-risk pipeline on synthetic visits")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name in ("run", "generate"), help="run configuration (JSON)")
        p.add_argument("--offline", action="store_true", help="rule-based extraction, no network")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--variant", choices=(*pl.VARIANTS, "both"))
        if name in ("run", "generate"):
            p.add_argument("--out", help="base directory for the new run directory")
        else:
            p.add_argument("--run", dest="run_dir", required=True, help="existing run directory")
        if name == "run":
            p.add_argument("--check", action="store_true", help="exit 4 if the summary fails the acceptance checks")
    return parser


def _config(args) -> pl.RunConfig:
    if args.config:
        cfg = pl.RunConfig.load(args.config)
    else:
        path = Path(args.run_dir) / "config.json"
        cfg = pl.RunConfig.load(path) if path.exists() else pl.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.variant:
        cfg.variant = args.variant
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if args.offline:
        cfg.extraction = {**cfg.extraction, "mode": "offline"}
    cfg.validate()
    return cfg


def _run_dir(args) -> Path:
    run = Path(args.run_dir)
    if not run.is_dir():
        raise pl.ConfigError(f"run directory {run} does not exist")
    if (run / "summary.json").exists():
        raise pl.ConfigError(f"{run} is a completed run; start a new one with 'edrk run'")
    return run


def _dispatch(args, cfg: pl.RunConfig) -> int:
    if args.command == "run":
        run, summary = pl.run_pipeline(cfg, offline=args.offline)
        print(run)
        if args.check:
            problems = pl.check_summary(summary)
            for p in problems:
                print(f"check failed: {p}", file=sys.stderr)
            if problems:
                return EXIT_CHECK
        return EXIT_OK
    if args.command == "generate":
        run = pl.new_run_dir(cfg.output_dir)
        (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
        pl._stage("generate", pl.stage_generate, cfg, run)
        print(run)
        return EXIT_OK
    run = _run_dir(args)
    if args.command == "extract":
        pl._stage("extract", pl.stage_extract, cfg, run, pl.make_client(cfg, args.offline))
    elif args.command == "harmonize":
        pl._stage("harmonize", pl.stage_harmonize, cfg, run)
    else:
        client = pl.make_client(cfg, args.offline) if args.command == "explain" else None
        for variant in cfg.variants():
            if args.command == "train":
                pl._stage("train", pl.stage_train, cfg, run, variant)
            elif args.command == "explain":
                pl._stage("explain", pl.stage_explain, cfg, run, variant, client)
            else:
                report = pl._stage("assess", pl.stage_assess, cfg, run, variant)
                print(f"{variant}: {report.n} narratives, error rate {report.error_rate:.2f}")
    print(run)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return _dispatch(args, cfg)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as exc:
        print(f"{exc} (artifacts so far are kept)", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
