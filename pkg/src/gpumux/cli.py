"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .audits import InvariantViolation
from .harness import ConfigError, cmd_datagen, cmd_graftbench, cmd_rl, cmd_trace, parse_config

_COMMANDS = {
    "datagen": (cmd_datagen, "sequential vs pipelined data generation sweep"),
    "rl": (cmd_rl, "sequential vs interleaved rollout sweep"),
    "graftbench": (cmd_graftbench, "graft vs export/import op-count scaling"),
    "trace": (cmd_trace, "paired utilization traces for one workload"),
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gpumux",
        description="Deterministic GPU scheduling and memory-sharing simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--json-events", action="store_true",
                        help="also write events.jsonl")
        sp.add_argument("--dump-tables", action="store_true",
                        help="dump final page tables as JSON (graftbench)")
    args = parser.parse_args(argv)
    command = _COMMANDS[args.command][0]
    try:
        cfg = parse_config(args.config)
        command(cfg, Path(args.out), seed=args.seed, json_events=args.json_events,
                dump_tables=args.dump_tables)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
