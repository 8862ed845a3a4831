"""Command line: ``passvp run | stats | diff``."""

from __future__ import annotations

import argparse
import logging
import sys

from ..sim import parse_duration
from ..trace import read_trace
from .config import ConfigError, PlatformConfig, load_config
from .driver import SCENARIOS
from .runner import EXIT_CHECK_FAILED, EXIT_CONFIG_ERROR, EXIT_OK, run_scenario
from .stats import diff_stats, emit_stats, format_table, read_csv, write_csv


def parse_args(argv=None):
    parser = argparse.ArgumentParser(prog="passvp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="build the platform and run a scripted scenario")
    run.add_argument("--config", help="platform config file (INI sections per field group)")
    run.add_argument("--backend", choices=("mock", "vfio"), help="device backend")
    run.add_argument("--device", help="PCI address of a vfio-pci bound device, e.g. 0000:01:00.0")
    run.add_argument("--scenario", default="enumerate-and-run", choices=sorted(SCENARIOS))
    run.add_argument("--trace", help="write JSON-lines trace here")
    run.add_argument("--stats", help="write statistics CSV here")
    run.add_argument("--quantum", help="interrupt polling period, e.g. 1us")
    run.add_argument("--length", type=int, default=4096, help="copy job length in bytes")
    run.add_argument("--seed", type=int, default=1, help="seed for the source buffer")

    st = sub.add_parser("stats", help="recompute statistics from a trace file")
    st.add_argument("trace")
    st.add_argument("--scenario", default="adhoc", help="scenario name recorded in the report")
    st.add_argument("--out", help="write statistics CSV here")

    df = sub.add_parser("diff", help="compare two statistics files")
    df.add_argument("a")
    df.add_argument("b")
    return parser.parse_args(argv)


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else PlatformConfig()
        if args.backend:
            cfg.device.backend = args.backend
        if args.device:
            cfg.device.sysfs_address = args.device
            if not args.backend:
                cfg.device.backend = "vfio"
        if args.quantum:
            try:
                cfg.quantum = parse_duration(args.quantum)
            except ValueError as exc:
                raise ConfigError(f"quantum: {exc}") from None
        if args.trace:
            cfg.trace_path = args.trace
        if args.stats:
            cfg.stats_path = args.stats
        if args.length < 0:
            raise ConfigError("length: must be non-negative")
        cfg.validate()
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    res = run_scenario(cfg, args.scenario, length=args.length, seed=args.seed)
    if res.result is not None:
        for check in res.result.checks:
            mark = "ok  " if check.passed else "FAIL"
            print(f"[{mark}] {check.step:<20} {check.detail}")
    if res.stats is not None:
        print()
        print(format_table(res.stats))
    if res.exit_status != EXIT_OK:
        print(f"error: {res.error}", file=sys.stderr)
    return res.exit_status


def _cmd_stats(args) -> int:
    try:
        with open(args.trace) as fh:
            report = emit_stats(read_trace(fh), args.scenario)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if args.out:
        with open(args.out, "w") as fh:
            write_csv(report, fh)
    print(format_table(report))
    return EXIT_OK


def _cmd_diff(args) -> int:
    try:
        with open(args.a) as fa, open(args.b) as fb:
            a, b = read_csv(fa), read_csv(fb)
        result = diff_stats(a, b)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    for line in result.differences:
        print(line)
    print(result.verdict)
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "stats": _cmd_stats, "diff": _cmd_diff}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
