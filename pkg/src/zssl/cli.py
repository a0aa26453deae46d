"""Command-line driver.

    zssl [STAGE] [--config run.json] [--set key=value ...]

Exit status: 0 on success, 1 on configuration or I/O errors, 2 when
training aborts on a non-finite loss or gradient.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from zssl import config as config_mod
from zssl import train
from zssl.checkpoint import CheckpointError

log = logging.getLogger("zssl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zssl", description="Masked-prediction speech pre-training at desk scale.")
    parser.add_argument("stage", nargs="?", choices=config_mod.STAGES,
                        help="pipeline stage; overrides the config's 'stage' field")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field (repeatable)")
    parser.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.stage:
        overrides.append(f"stage={args.stage}")
    try:
        cfg = config_mod.load(args.config, overrides)
    except (config_mod.ConfigError, OSError) as exc:
        print(f"zssl: {exc}", file=sys.stderr)
        return 1
    if args.print_config:
        print(cfg.to_json())
        return 0
    try:
        cfg.root.mkdir(parents=True, exist_ok=True)
        config_mod.save(cfg, cfg.root / f"config.{cfg.stage}.json")
        summary = train.run(cfg)
    except train.TrainingAborted as exc:
        print(f"zssl: training aborted: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, CheckpointError) as exc:
        print(f"zssl: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"stage": cfg.stage, **summary}, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
